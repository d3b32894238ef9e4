"""PointNet++-style set-abstraction / feature-propagation backbone.

Sampling and grouping are computed once per scene from the original stream's
coordinates (:class:`SamplingPlan`) and reused for every stream, so point ``i``
at every stage refers to the same physical point in both streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

INTERP_FLOOR = 1e-8


@dataclass(frozen=True)
class SAStage:
    npoint: int
    radius: float
    nsample: int
    widths: tuple[int, ...]


@dataclass(frozen=True)
class BackboneConfig:
    n_points: int = 1024
    in_features: int = 7  # rgb + normal + height
    sa: tuple[SAStage, ...] = (
        SAStage(256, 0.3, 16, (32,)),
        SAStage(128, 0.6, 16, (64,)),
        SAStage(64, 1.2, 16, (128,)),
        SAStage(32, 2.4, 16, (256,)),
    )
    fp: tuple[tuple[int, ...], ...] = ((128,), (128,))
    mlp_norm: str = "points"

    def __post_init__(self):
        sizes = [self.n_points] + [s.npoint for s in self.sa]
        if len(self.sa) != 4 or len(self.fp) != 2:
            raise ValueError("backbone needs four SA stages and two FP stages")
        if any(a <= b for a, b in zip(sizes, sizes[1:])) or sizes[-1] < 8:
            raise ValueError(f"stage sizes must strictly decrease to >= 8, got {sizes}")

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        return tuple(s.npoint for s in self.sa)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.widths[-1] for s in self.sa)

    @property
    def d_fp(self) -> int:
        return self.fp[-1][-1]


def paper_scale_config() -> BackboneConfig:
    """The full-size 8192 -> 2048 -> 1024 -> 512 -> 256 cascade."""
    return BackboneConfig(
        n_points=8192,
        sa=(
            SAStage(2048, 0.2, 64, (64, 64, 128)),
            SAStage(1024, 0.4, 32, (128, 128, 256)),
            SAStage(512, 0.8, 16, (128, 128, 256)),
            SAStage(256, 1.2, 16, (128, 128, 256)),
        ),
        fp=((256, 256), (256, 256)),
    )


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Ordered named parameters with seeded uniform(+-1/sqrt(fan_in)) init."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.tensors: dict[str, Tensor] = {}

    def uniform(self, name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape, value: float) -> Tensor:
        return self._add(name, np.full(shape, float(value)))

    def _add(self, name: str, data) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True)
        self.tensors[name] = t
        return t


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.weight = store.uniform(f"{name}.weight", (d_in, d_out), d_in)
        self.bias = store.uniform(f"{name}.bias", (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gain = store.constant(f"{name}.gain", (d,), 1.0)
        self.shift = store.constant(f"{name}.shift", (d,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self.gain), self.shift)


MLP_NORMS = ("points", "channels")


def point_norm(x: Tensor) -> Tensor:
    """Standardize every channel over the points of one stream.

    ``x`` is ``(n, w)`` or ``(S, ..., w)``; for the latter all axes between
    the stream axis and the channel axis are pooled.
    """
    if x.ndim == 2:
        return T.layer_norm(x, axis=0)
    shape = x.shape
    flat = T.reshape(x, (shape[0], -1, shape[-1]))
    return T.reshape(T.layer_norm(flat, axis=1), shape)


class SharedMLP:
    """Per-point stack of linear -> layer-norm -> relu.

    ``norm="points"`` standardizes each channel across the scene's points
    (the layer_norm primitive along the point axis); ``"channels"`` is the
    usual per-point layer norm. The linear maps carry no bias and the norm no
    affine part: standardizing right after the projection cancels a bias.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, widths, norm: str = "points"):
        if norm not in MLP_NORMS:
            raise ValueError(f"norm must be one of {MLP_NORMS}, got {norm!r}")
        self.norm = norm
        self.layers = []
        for k, w in enumerate(widths):
            self.layers.append(Linear(store, f"{name}.{k}", d_in, w, bias=False))
            d_in = w
        self.d_out = d_in

    def __call__(self, x: Tensor) -> Tensor:
        for lin in self.layers:
            h = lin(x)
            x = T.relu(point_norm(h) if self.norm == "points" else T.layer_norm(h))
        return x


# ----------------------------------------------------------------- geometry


def farthest_point_sample(xyz: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min sampling; ties go to the smallest index."""
    n = xyz.shape[0]
    if k > n:
        raise ValueError(f"cannot sample {k} of {n} points")
    if not 0 <= start < n:
        raise IndexError(f"start index {start} outside [0, {n})")
    out = np.empty(k, dtype=np.int64)
    if k == 0:
        return out
    dist = np.full(n, np.inf)
    cur = start
    for i in range(k):
        out[i] = cur
        diff = xyz - xyz[cur]
        dist = np.minimum(dist, np.einsum("ij,ij->i", diff, diff))
        dist[out[: i + 1]] = -1.0
        cur = int(np.argmax(dist))
    return out


def ball_query_group(xyz: np.ndarray, centers: np.ndarray, radius: float, max_neighbors: int) -> np.ndarray:
    """``(k, max_neighbors)`` neighbor table.

    Each row holds the center plus the lowest-index other points within
    ``radius``, sorted ascending and right-padded with the center index.
    """
    if radius <= 0 or max_neighbors < 1:
        raise ValueError("radius must be positive and max_neighbors >= 1")
    centers = np.asarray(centers, dtype=np.int64)
    diff = xyz[centers][:, None, :] - xyz[None, :, :]
    inside = np.einsum("kij,kij->ki", diff, diff) <= radius * radius
    inside[np.arange(centers.size), centers] = False
    table = np.empty((centers.size, max_neighbors), dtype=np.int64)
    for r, c in enumerate(centers):
        others = np.flatnonzero(inside[r])[: max_neighbors - 1]
        row = np.sort(np.append(others, c))
        table[r, : row.size] = row
        table[r, row.size :] = c
    return table


def interpolation_matrix(src_xyz: np.ndarray, dst_xyz: np.ndarray, k: int = 3) -> np.ndarray:
    """Dense ``(n_dst, n_src)`` inverse-distance weights over the k nearest sources.

    A destination that coincides with a source (distance at the floor) copies it.
    """
    n_src = src_xyz.shape[0]
    if n_src == 0:
        raise ValueError("interpolation needs at least one source point")
    k = min(k, n_src)
    d = np.sqrt(((dst_xyz[:, None, :] - src_xyz[None, :, :]) ** 2).sum(-1))
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.maximum(np.take_along_axis(d, nn, axis=1), INTERP_FLOOR)
    w = 1.0 / dn
    hit = dn <= INTERP_FLOOR
    snap = hit.any(axis=1)
    w[snap] = hit[snap].astype(float)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((dst_xyz.shape[0], n_src))
    np.put_along_axis(mat, nn, w, axis=1)
    return mat


@dataclass
class SamplingPlan:
    """Stage indices, neighbor tables and interpolation weights for one scene."""

    sample_indices: list[np.ndarray]  # per SA stage, into the previous stage
    groups: list[np.ndarray]  # per SA stage, (npoint, nsample) into the previous stage
    stage_xyz: list[np.ndarray]  # original-stream xyz for input and each stage
    interp: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def interpolation(self, src_stage: int, dst_stage: int) -> np.ndarray:
        key = (src_stage, dst_stage)
        if key not in self.interp:
            self.interp[key] = interpolation_matrix(self.stage_xyz[src_stage], self.stage_xyz[dst_stage])
        return self.interp[key]

    def absolute_indices(self, stage: int) -> np.ndarray:
        """Indices of stage ``stage`` points into the original scene."""
        idx = np.arange(self.stage_xyz[0].shape[0])
        for s in self.sample_indices[:stage]:
            idx = idx[s]
        return idx


def build_plan(xyz: np.ndarray, cfg: BackboneConfig) -> SamplingPlan:
    stage_xyz = [xyz]
    samples, groups = [], []
    cur = xyz
    for st in cfg.sa:
        idx = farthest_point_sample(cur, st.npoint, 0)
        groups.append(ball_query_group(cur, idx, st.radius, st.nsample))
        samples.append(idx)
        cur = cur[idx]
        stage_xyz.append(cur)
    plan = SamplingPlan(samples, groups, stage_xyz)
    # pre-compute the FP weights used by the backbone, heads and multi-scale bank
    for src, dst in ((4, 3), (3, 2), (2, 1)):
        plan.interpolation(src, dst)
    return plan


# -------------------------------------------------------------------- layers


def set_abstraction(
    stream_xyz: np.ndarray,
    features: Tensor | None,
    centers: np.ndarray,
    group: np.ndarray,
    radius: float,
    mlp: SharedMLP,
) -> tuple[np.ndarray, Tensor]:
    """Group -> shared MLP over [relative xyz / radius, features] -> max over neighbors.

    ``stream_xyz`` is ``(S, n, 3)`` and ``features`` ``(S, n, c)``; returns the
    sampled ``(S, k, 3)`` coordinates and ``(S, k, width)`` features.
    """
    rel = (stream_xyz[:, group, :] - stream_xyz[:, centers, None, :]) / radius
    parts = [Tensor(rel)]
    if features is not None:
        parts.append(T.gather(features, group))
    x = T.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return stream_xyz[:, centers, :], T.max(mlp(x), axis=-2)


def interpolate(src_feats: Tensor, weights: np.ndarray) -> Tensor:
    return T.matmul(Tensor(weights), src_feats)


def feature_propagation(
    src_feats: Tensor,
    weights: np.ndarray,
    skip_feats: Tensor | None,
    mlp: SharedMLP,
) -> Tensor:
    """3-NN inverse-distance interpolation, skip concatenation, shared MLP;
    ``weights`` comes from :func:`interpolation_matrix`."""
    x = interpolate(src_feats, weights)
    if skip_feats is not None:
        x = T.concat([x, skip_feats], axis=-1)
    return mlp(x)


@dataclass
class BackboneOutput:
    f1: Tensor  # (S, N1, d1)
    f2_raw: Tensor  # (S, N2, d2)
    base: Tensor  # (S, N2, d_fp)
    plan: SamplingPlan

    @property
    def sample_indices(self) -> list[np.ndarray]:
        return self.plan.sample_indices

    def stream(self, s: int) -> "BackboneOutput":
        """Outputs of stream ``s`` alone, leading axis dropped."""
        return BackboneOutput(T.select(self.f1, s), T.select(self.f2_raw, s), T.select(self.base, s), self.plan)


class Backbone:
    def __init__(self, store: ParamStore, cfg: BackboneConfig, prefix: str = "backbone"):
        self.cfg = cfg
        self.sa = []
        d_in = cfg.in_features
        for k, st in enumerate(cfg.sa):
            self.sa.append(SharedMLP(store, f"{prefix}.sa{k + 1}", 3 + d_in, st.widths, cfg.mlp_norm))
            d_in = st.widths[-1]
        w = cfg.widths
        self.fp1 = SharedMLP(store, f"{prefix}.fp1", w[3] + w[2], cfg.fp[0], cfg.mlp_norm)
        self.fp2 = SharedMLP(store, f"{prefix}.fp2", cfg.fp[0][-1] + w[1], cfg.fp[1], cfg.mlp_norm)

    def __call__(self, streams: np.ndarray, plan: SamplingPlan | None = None) -> BackboneOutput:
        """``streams`` is ``(S, N, 10)``; sampling comes from stream 0 unless ``plan`` is given."""
        streams = np.asarray(streams, dtype=np.float64)
        if streams.ndim == 2:
            streams = streams[None]
        if streams.shape[-1] != 3 + self.cfg.in_features or streams.shape[1] != self.cfg.n_points:
            raise T.ShapeError(f"backbone expects (S, {self.cfg.n_points}, 10) input, got {streams.shape}")
        if plan is None:
            plan = build_plan(streams[0, :, :3], self.cfg)
        xyz = streams[..., :3]
        feats: Tensor | None = Tensor(streams[..., 3:])
        stage_feats = []
        for st, mlp, centers, group in zip(self.cfg.sa, self.sa, plan.sample_indices, plan.groups):
            xyz, feats = set_abstraction(xyz, feats, centers, group, st.radius, mlp)
            stage_feats.append(feats)
        f1, f2, f3, f4 = stage_feats
        up3 = feature_propagation(f4, plan.interpolation(4, 3), f3, self.fp1)
        base = feature_propagation(up3, plan.interpolation(3, 2), f2, self.fp2)
        return BackboneOutput(f1, f2, base, plan)
