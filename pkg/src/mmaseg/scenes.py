"""Procedural long-tailed indoor scenes in the 10-column point encoding.

Columns: xyz (m), rgb in [0, 1], unit surface normal, height above floor.
Every value is float32-representable so datasets round-trip bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

XYZ = slice(0, 3)
RGB = slice(3, 6)
NORMAL = slice(6, 9)
HEIGHT = 9
N_COLUMNS = 10
MIN_POINTS = 256

GEOMETRIES = ("plane", "box", "cylinder", "cluster")
TIERS = ("head", "medium", "tail")

# z and floor offsets live on a dyadic grid so z - floor_z is exact in float32
_Z_GRID = 2.0**-20
_FLOOR_GRID = 2.0**-10


@dataclass(frozen=True)
class ClassSpec:
    name: str
    geometry: str
    color: tuple[float, float, float]
    tier: str
    probability: float = 1.0
    points: int = 0
    max_instances: int = 1
    size: tuple[float, ...] = ()
    elevation: tuple[float, float] = (0.0, 0.0)
    share: float = 0.0  # fraction of leftover points, head planes only


@dataclass(frozen=True)
class SceneConfig:
    classes: tuple[ClassSpec, ...]
    n_points: int = 1024
    color_noise: float = 0.05
    position_noise: float = 0.005
    room_width: tuple[float, float] = (3.0, 4.0)
    room_depth: tuple[float, float] = (2.5, 3.5)
    wall_height: float = 1.6
    floor_offset: float = 0.25

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)


def default_classes() -> tuple[ClassSpec, ...]:
    return (
        ClassSpec("floor", "plane", (0.55, 0.42, 0.28), "head", share=0.55),
        ClassSpec("wall", "plane", (0.82, 0.80, 0.76), "head", share=0.45),
        # table shares the floor's palette: only geometry separates them
        ClassSpec("table", "box", (0.56, 0.43, 0.29), "medium", 0.8, 100, 1, (1.0, 1.4, 0.6, 0.9, 0.7, 0.8)),
        ClassSpec("chair", "box", (0.20, 0.28, 0.62), "medium", 0.8, 48, 2, (0.4, 0.5, 0.4, 0.5, 0.8, 0.95)),
        ClassSpec("lamp", "cluster", (0.95, 0.85, 0.25), "tail", 0.45, 36, 1, (0.18, 0.24), (1.1, 1.4)),
        ClassSpec("bin", "cylinder", (0.20, 0.62, 0.30), "tail", 0.45, 36, 1, (0.18, 0.24, 0.35, 0.5)),
    )


def default_config(**overrides) -> SceneConfig:
    return replace(SceneConfig(classes=default_classes()), **overrides)


def config_with_classes(n_classes: int, **overrides) -> SceneConfig:
    """Default config truncated to its first ``n_classes`` classes."""
    classes = default_classes()
    if not 4 <= n_classes <= len(classes):
        raise ValueError(f"class count must be in [4, {len(classes)}], got {n_classes}")
    return default_config(classes=classes[:n_classes], **overrides)


@dataclass
class LabeledScene:
    points: np.ndarray  # (N, 10) float64
    point_labels: np.ndarray  # (N,) int64, evaluation only
    scene_labels: np.ndarray  # (C,) uint8

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def floor_z(self) -> float:
        return float(self.points[0, 2] - self.points[0, HEIGHT])

    def copy(self) -> "LabeledScene":
        return LabeledScene(self.points.copy(), self.point_labels.copy(), self.scene_labels.copy())


@dataclass
class DatasetManifest:
    n_scenes: int
    n_points: int
    n_classes: int
    class_names: tuple[str, ...]
    class_counts: tuple[int, ...]  # training split only
    seed: int
    n_train: int
    tiers: tuple[str, ...] = ()

    @property
    def n_eval(self) -> int:
        return self.n_scenes - self.n_train

    def to_lines(self) -> list[str]:
        return [
            f"scenes={self.n_scenes}",
            f"points={self.n_points}",
            f"classes={self.n_classes}",
            f"class_names={','.join(self.class_names)}",
            f"class_counts={','.join(str(c) for c in self.class_counts)}",
            f"seed={self.seed}",
            f"train_scenes={self.n_train}",
            f"tiers={','.join(self.tiers)}",
        ]

    @classmethod
    def from_lines(cls, lines: list[str]) -> "DatasetManifest":
        kv = {}
        for line in lines:
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DatasetFormatError(f"manifest line without '=': {line!r}")
            kv[key] = value
        try:
            return cls(
                n_scenes=int(kv["scenes"]),
                n_points=int(kv["points"]),
                n_classes=int(kv["classes"]),
                class_names=tuple(kv["class_names"].split(",")),
                class_counts=tuple(int(v) for v in kv["class_counts"].split(",")),
                seed=int(kv["seed"]),
                n_train=int(kv["train_scenes"]),
                tiers=tuple(v for v in kv.get("tiers", "").split(",") if v),
            )
        except (KeyError, ValueError) as exc:
            raise DatasetFormatError(f"malformed manifest: {exc}") from None


# ---------------------------------------------------------------- geometry


def _rot_z(p: np.ndarray, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    out = p.copy()
    out[:, 0] = c * p[:, 0] - s * p[:, 1]
    out[:, 1] = s * p[:, 0] + c * p[:, 1]
    return out


def _sample_floor(rng, n, w, d):
    xyz = np.column_stack([rng.uniform(-w / 2, w / 2, n), rng.uniform(-d / 2, d / 2, n), np.zeros(n)])
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    return xyz, normals


def _sample_walls(rng, n, w, d, h):
    perim = 2 * (w + d)
    t = rng.uniform(0, perim, n)
    z = rng.uniform(0, h, n)
    xyz = np.empty((n, 3))
    normals = np.zeros((n, 3))
    edges = [
        (0.0, w, lambda u: (u - w / 2, -d / 2), (0.0, 1.0)),
        (w, w + d, lambda u: (w / 2, u - w - d / 2), (-1.0, 0.0)),
        (w + d, 2 * w + d, lambda u: (w / 2 - (u - w - d), d / 2), (0.0, -1.0)),
        (2 * w + d, perim, lambda u: (-w / 2, d / 2 - (u - 2 * w - d)), (1.0, 0.0)),
    ]
    for lo, hi, pos, nrm in edges:
        m = (t >= lo) & (t < hi)
        x, y = pos(t[m])
        xyz[m, 0], xyz[m, 1] = x, y
        normals[m, 0], normals[m, 1] = nrm
    xyz[:, 2] = z
    return xyz, normals


def _sample_box(rng, n, sx, sy, sz):
    # five visible faces (no bottom), area-weighted
    faces = [
        (sx * sy, 2, 1.0),
        (sy * sz, 0, 1.0),
        (sy * sz, 0, -1.0),
        (sx * sz, 1, 1.0),
        (sx * sz, 1, -1.0),
    ]
    areas = np.array([f[0] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    half = np.array([sx / 2, sy / 2, sz / 2])
    u = rng.uniform(-1, 1, (n, 3)) * half
    u[:, 2] += sz / 2
    normals = np.zeros((n, 3))
    for k, (_, axis, sign) in enumerate(faces):
        m = which == k
        if axis == 2:
            u[m, 2] = sz
        else:
            u[m, axis] = sign * half[axis]
        normals[m, axis] = sign
    return u, normals


def _sample_cylinder(rng, n, r, h):
    side, top = 2 * np.pi * r * h, np.pi * r * r
    on_top = rng.uniform(0, side + top, n) >= side
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(on_top, r * np.sqrt(rng.uniform(0, 1, n)), r)
    z = np.where(on_top, h, rng.uniform(0, h, n))
    xyz = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), z])
    normals = np.where(
        on_top[:, None],
        np.array([0.0, 0.0, 1.0]),
        np.column_stack([np.cos(ang), np.sin(ang), np.zeros(n)]),
    )
    return xyz, normals


def _sample_cluster(rng, n, r):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r, v


def _place(rng, w, d, footprint, taken, margin=0.15):
    for _ in range(30):
        x = rng.uniform(-w / 2 + footprint + margin, w / 2 - footprint - margin)
        y = rng.uniform(-d / 2 + footprint + margin, d / 2 - footprint - margin)
        if all(np.hypot(x - tx, y - ty) > footprint + tr for tx, ty, tr in taken):
            break
    taken.append((x, y, footprint))
    return x, y


def _object_points(rng, spec: ClassSpec, n, w, d, taken):
    s = spec.size
    if spec.geometry == "box":
        sx, sy, sz = rng.uniform(s[0], s[1]), rng.uniform(s[2], s[3]), rng.uniform(s[4], s[5])
        local, normals = _sample_box(rng, n, sx, sy, sz)
        footprint = 0.5 * np.hypot(sx, sy)
    elif spec.geometry == "cylinder":
        r, h = rng.uniform(s[0], s[1]), rng.uniform(s[2], s[3])
        local, normals = _sample_cylinder(rng, n, r, h)
        footprint = r
    elif spec.geometry == "cluster":
        r = rng.uniform(s[0], s[1])
        local, normals = _sample_cluster(rng, n, r)
        local[:, 2] += rng.uniform(*spec.elevation)
        footprint = r
    else:
        raise ValueError(f"geometry {spec.geometry!r} is not an object geometry")
    yaw = rng.uniform(0, 2 * np.pi)
    local, normals = _rot_z(local, yaw), _rot_z(normals, yaw)
    x, y = _place(rng, w, d, footprint, taken)
    local[:, 0] += x
    local[:, 1] += y
    return local, normals


def _validate(cfg: SceneConfig) -> None:
    if cfg.n_classes < 4:
        raise ValueError(f"need at least 4 classes, got {cfg.n_classes}")
    if cfg.n_points < MIN_POINTS:
        raise ValueError(f"n_points must be >= {MIN_POINTS}, got {cfg.n_points}")
    for c in cfg.classes:
        if c.geometry not in GEOMETRIES or c.tier not in TIERS:
            raise ValueError(f"class {c.name!r}: bad geometry or tier")
    heads = [c for c in cfg.classes if c.tier == "head"]
    if not heads:
        raise ValueError("config declares no head-tier class")
    if any(c.geometry != "plane" for c in heads):
        raise ValueError("head-tier classes must be planes")


def generate_scene(seed: int, cfg: SceneConfig | None = None) -> LabeledScene:
    """Deterministic scene for ``(seed, cfg)``."""
    cfg = default_config() if cfg is None else cfg
    _validate(cfg)
    rng = np.random.default_rng(seed)
    w = rng.uniform(*cfg.room_width)
    d = rng.uniform(*cfg.room_depth)
    floor_z = np.round(rng.uniform(-cfg.floor_offset, cfg.floor_offset) / _FLOOR_GRID) * _FLOOR_GRID

    # decide objects and their point budgets first
    objects: list[tuple[int, int]] = []
    for cid, spec in enumerate(cfg.classes):
        if spec.tier == "head":
            continue
        for _ in range(spec.max_instances):
            if rng.uniform() < spec.probability:
                n = int(round(spec.points * rng.uniform(0.8, 1.2)))
                objects.append((cid, max(n, 1)))
    budget = cfg.n_points - sum(n for _, n in objects)
    heads = [(cid, c) for cid, c in enumerate(cfg.classes) if c.tier == "head"]
    if budget < 8 * len(heads):
        raise ValueError("n_points too small for the configured objects")
    shares = np.array([c.share if c.share > 0 else 1.0 for _, c in heads])
    head_counts = np.floor(budget * shares / shares.sum()).astype(int)
    head_counts[0] += budget - head_counts.sum()

    xyz_parts, nrm_parts, labels = [], [], []
    for k, ((cid, spec), n) in enumerate(zip(heads, head_counts)):
        if k == 0 or spec.name == "floor":
            xyz, nrm = _sample_floor(rng, n, w, d)
        else:
            xyz, nrm = _sample_walls(rng, n, w, d, cfg.wall_height)
        xyz_parts.append(xyz)
        nrm_parts.append(nrm)
        labels.append(np.full(n, cid))
    taken: list = []
    for cid, n in objects:
        xyz, nrm = _object_points(rng, cfg.classes[cid], n, w, d, taken)
        xyz_parts.append(xyz)
        nrm_parts.append(nrm)
        labels.append(np.full(n, cid))

    xyz = np.concatenate(xyz_parts)
    nrm = np.concatenate(nrm_parts)
    lab = np.concatenate(labels).astype(np.int64)
    xyz = xyz + rng.normal(scale=cfg.position_noise, size=xyz.shape)
    xyz[:, 2] = np.maximum(xyz[:, 2], 0.0) + floor_z
    palette = np.array([c.color for c in cfg.classes])
    rgb = np.clip(palette[lab] + rng.normal(scale=cfg.color_noise, size=(lab.size, 3)), 0.0, 1.0)

    order = rng.permutation(lab.size)
    xyz, nrm, rgb, lab = xyz[order], nrm[order], rgb[order], lab[order]

    pts = np.empty((lab.size, N_COLUMNS))
    pts[:, 0:2] = xyz[:, 0:2].astype(np.float32)
    pts[:, 2] = np.round(xyz[:, 2] / _Z_GRID) * _Z_GRID
    pts[:, RGB] = rgb.astype(np.float32)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    pts[:, NORMAL] = nrm.astype(np.float32)
    pts[:, HEIGHT] = pts[:, 2] - floor_z
    scene_labels = np.zeros(cfg.n_classes, dtype=np.uint8)
    scene_labels[np.unique(lab)] = 1
    return LabeledScene(pts, lab, scene_labels)


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def class_point_counts(scenes, n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for s in scenes:
        counts += np.bincount(s.point_labels, minlength=n_classes)
    return counts


def generate_dataset(
    seed: int = 0,
    n_train: int = 200,
    n_eval: int = 50,
    cfg: SceneConfig | None = None,
) -> tuple[list[LabeledScene], DatasetManifest]:
    """Training scenes followed by evaluation scenes, plus their manifest."""
    cfg = default_config() if cfg is None else cfg
    if n_train < 1 or n_eval < 0:
        raise ValueError(f"invalid scene counts: train={n_train}, eval={n_eval}")
    scenes = [generate_scene(scene_seed(seed, i), cfg) for i in range(n_train + n_eval)]
    manifest = DatasetManifest(
        n_scenes=len(scenes),
        n_points=cfg.n_points,
        n_classes=cfg.n_classes,
        class_names=cfg.class_names,
        class_counts=tuple(int(c) for c in class_point_counts(scenes[:n_train], cfg.n_classes)),
        seed=seed,
        n_train=n_train,
        tiers=tuple(c.tier for c in cfg.classes),
    )
    return scenes, manifest


# ------------------------------------------------------- stream transforms


def mask_rgb(scene: LabeledScene) -> LabeledScene:
    out = scene.copy()
    out.points[:, RGB] = 0.0
    return out


def random_horizontal(seed: int) -> tuple[float, bool]:
    rng = np.random.default_rng(seed)
    return float(rng.uniform(0.0, 2.0 * np.pi)), bool(rng.uniform() < 0.5)


def horizontal_transform(
    scene: LabeledScene,
    seed: int | None = None,
    *,
    angle: float | None = None,
    mirror: bool | None = None,
) -> LabeledScene:
    """Rotate about the vertical axis, optionally mirroring y -> -y first.

    ``angle`` / ``mirror`` override the values drawn from ``seed``.
    """
    if angle is None or mirror is None:
        if seed is None:
            raise ValueError("need a seed or an explicit angle and mirror flag")
        a, m = random_horizontal(seed)
        angle = a if angle is None else angle
        mirror = m if mirror is None else mirror
    out = scene.copy()
    if angle == 0.0 and not mirror:
        return out
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if mirror:
        rot = rot @ np.diag([1.0, -1.0, 1.0])
    out.points[:, XYZ] = scene.points[:, XYZ] @ rot.T
    out.points[:, NORMAL] = scene.points[:, NORMAL] @ rot.T
    return out


# -------------------------------------------------------------- file format

MAGIC = b"MMAPC1\n"
SENTINEL = b"#MANIFEST\n"


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


def encode_dataset(scenes: list[LabeledScene], manifest: DatasetManifest) -> bytes:
    if not scenes:
        raise ValueError("cannot write an empty dataset")
    n, c = scenes[0].n_points, scenes[0].scene_labels.size
    parts = [MAGIC, struct.pack("<III", len(scenes), n, c)]
    for s in scenes:
        if s.n_points != n or s.scene_labels.size != c:
            raise ValueError("all scenes must share point and class counts")
        parts.append(s.points.astype("<f4").tobytes())
        parts.append(s.point_labels.astype("<u2").tobytes())
        parts.append(s.scene_labels.astype("u1").tobytes())
    parts.append(SENTINEL)
    parts.append(("\n".join(manifest.to_lines()) + "\n").encode("utf-8"))
    return b"".join(parts)


def decode_dataset(blob: bytes) -> tuple[list[LabeledScene], DatasetManifest]:
    if not blob.startswith(MAGIC):
        raise BadMagicError("not a dataset file (bad magic bytes)")
    off = len(MAGIC)
    if len(blob) < off + 12:
        raise TruncatedError("header truncated")
    m, n, c = struct.unpack_from("<III", blob, off)
    off += 12
    stride = n * N_COLUMNS * 4 + n * 2 + c
    if len(blob) < off + m * stride:
        raise TruncatedError(f"payload truncated: header promises {m} scenes of {n} points")
    scenes = []
    for _ in range(m):
        pts = np.frombuffer(blob, "<f4", n * N_COLUMNS, off).reshape(n, N_COLUMNS).astype(np.float64)
        off += n * N_COLUMNS * 4
        lab = np.frombuffer(blob, "<u2", n, off).astype(np.int64)
        off += n * 2
        sl = np.frombuffer(blob, "u1", c, off).copy()
        off += c
        scenes.append(LabeledScene(pts, lab, sl))
    if blob[off : off + len(SENTINEL)] != SENTINEL:
        raise CountMismatchError("payload does not end where the header says (missing manifest sentinel)")
    manifest = DatasetManifest.from_lines(blob[off + len(SENTINEL) :].decode("utf-8").splitlines())
    if (manifest.n_scenes, manifest.n_points, manifest.n_classes) != (m, n, c):
        raise CountMismatchError(
            f"manifest declares {manifest.n_scenes}x{manifest.n_points}x{manifest.n_classes}, header {m}x{n}x{c}"
        )
    return scenes, manifest


def write_dataset(scenes: list[LabeledScene], manifest: DatasetManifest, path) -> None:
    Path(path).write_bytes(encode_dataset(scenes, manifest))


def read_dataset(path) -> tuple[list[LabeledScene], DatasetManifest]:
    return decode_dataset(Path(path).read_bytes())


@dataclass
class Dataset:
    scenes: list[LabeledScene]
    manifest: DatasetManifest
    train: list[LabeledScene] = field(init=False)
    eval: list[LabeledScene] = field(init=False)

    def __post_init__(self) -> None:
        self.train = self.scenes[: self.manifest.n_train]
        self.eval = self.scenes[self.manifest.n_train :]

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls(*read_dataset(path))

    @classmethod
    def generate(cls, seed=0, n_train=200, n_eval=50, cfg=None) -> "Dataset":
        return cls(*generate_dataset(seed, n_train, n_eval, cfg))
