import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmaseg import tensor as T
from mmaseg.backbone import (
    Backbone,
    BackboneConfig,
    ParamStore,
    SAStage,
    SharedMLP,
    ball_query_group,
    build_plan,
    farthest_point_sample,
    interpolation_matrix,
    paper_scale_config,
    point_norm,
    set_abstraction,
)
from mmaseg.tensor import Tensor

seeds = st.integers(0, 2**31 - 1)


def fps_oracle(xyz, k, start=0):
    chosen = [start]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(len(xyz)):
            if i in chosen:
                continue
            d = min(float(np.sum((xyz[i] - xyz[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def ball_oracle(xyz, centers, radius, m):
    rows = []
    for c in centers:
        others = [j for j in range(len(xyz)) if j != c and np.sum((xyz[j] - xyz[c]) ** 2) <= radius * radius]
        row = sorted(others[: m - 1] + [int(c)])
        rows.append(row + [int(c)] * (m - len(row)))
    return np.array(rows)


def interp_oracle(src, dst, k=3):
    out = np.zeros((len(dst), len(src)))
    for i, p in enumerate(dst):
        d = np.sqrt(((src - p) ** 2).sum(1))
        nn = sorted(range(len(src)), key=lambda j: (d[j], j))[: min(k, len(src))]
        dn = np.maximum(d[nn], 1e-8)
        if np.any(dn <= 1e-8):
            w = (dn <= 1e-8).astype(float)
        else:
            w = 1.0 / dn
        out[i, nn] = w / w.sum()
    return out


# --------------------------------------------------------------------- FPS


def test_fps_line():
    xyz = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    np.testing.assert_array_equal(farthest_point_sample(xyz, 2, 0), [0, 3])


def test_fps_duplicates_tie_to_lowest_index():
    xyz = np.zeros((5, 3))
    np.testing.assert_array_equal(farthest_point_sample(xyz, 3), [0, 1, 2])


def test_fps_errors():
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 4)
    with pytest.raises(IndexError):
        farthest_point_sample(np.zeros((3, 3)), 2, start=5)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 25), st.data(), seeds)
def test_fps_matches_oracle(n, data, seed):
    xyz = np.random.default_rng(seed).uniform(size=(n, 3))
    k = data.draw(st.integers(1, n))
    np.testing.assert_array_equal(farthest_point_sample(xyz, k), fps_oracle(xyz, k))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), seeds)
def test_fps_indices_unique(n, seed):
    xyz = np.random.default_rng(seed).integers(0, 3, size=(n, 3)).astype(float)
    idx = farthest_point_sample(xyz, n)
    assert len(set(idx.tolist())) == n


# -------------------------------------------------------------- ball query


def test_ball_query_infinite_radius():
    xyz = np.random.default_rng(0).normal(size=(10, 3))
    table = ball_query_group(xyz, np.array([0]), np.inf, 10)
    np.testing.assert_array_equal(table[0], np.arange(10))


def test_ball_query_isolated_center_pads():
    xyz = np.array([[0.0, 0, 0], [10, 0, 0], [20, 0, 0]])
    np.testing.assert_array_equal(ball_query_group(xyz, np.array([1]), 1.0, 4), [[1, 1, 1, 1]])


def test_ball_query_errors():
    with pytest.raises(ValueError):
        ball_query_group(np.zeros((3, 3)), np.array([0]), 0.0, 2)
    with pytest.raises(ValueError):
        ball_query_group(np.zeros((3, 3)), np.array([0]), 1.0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.floats(0.05, 1.5), seeds)
def test_ball_query_matches_oracle(n, m, radius, seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(size=(n, 3))
    centers = rng.choice(n, size=min(n, 5), replace=False)
    np.testing.assert_array_equal(ball_query_group(xyz, centers, radius, m), ball_oracle(xyz, centers, radius, m))


# ------------------------------------------------------------ interpolation


def test_interpolation_coincident_copies():
    src = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    w = interpolation_matrix(src, src[[1]])
    np.testing.assert_array_equal(w, [[0, 1, 0]])


def test_interpolation_equidistant_is_mean():
    src = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [5, 5, 5]])
    w = interpolation_matrix(src, np.zeros((1, 3)))
    np.testing.assert_allclose(w, [[1 / 3, 1 / 3, 1 / 3, 0]], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), seeds)
def test_interpolation_matches_oracle(ns, nd, seed):
    rng = np.random.default_rng(seed)
    src, dst = rng.uniform(size=(ns, 3)), rng.uniform(size=(nd, 3))
    w = interpolation_matrix(src, dst)
    np.testing.assert_allclose(w, interp_oracle(src, dst), atol=1e-10)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)


# -------------------------------------------------------------- layers / net


def test_point_norm_standardizes_channels():
    x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(2, 6, 4, 5)))
    y = point_norm(x).data.reshape(2, 24, 5)
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)


def test_point_norm_fd():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 5, 3)), requires_grad=True)
    w = np.random.default_rng(2).normal(size=(2, 5, 3))
    assert T.finite_difference_check(lambda x: T.reduce_sum(T.mul(point_norm(x), w)), x) < 1e-4


def test_shared_mlp_rejects_unknown_norm():
    with pytest.raises(ValueError):
        SharedMLP(ParamStore(0), "m", 3, (4,), norm="batch")


@pytest.mark.parametrize("norm", ["points", "channels"])
def test_sa_permutation_invariant_within_neighborhood(norm):
    rng = np.random.default_rng(3)
    xyz = rng.uniform(size=(1, 20, 3))
    feats = Tensor(rng.normal(size=(1, 20, 4)))
    mlp = SharedMLP(ParamStore(0), "sa", 7, (8,), norm)
    centers = np.array([0, 5, 9])
    group = ball_query_group(xyz[0], centers, 0.6, 6)
    _, ref = set_abstraction(xyz, feats, centers, group, 0.6, mlp)
    perm = np.stack([rng.permutation(row) for row in group])
    _, out = set_abstraction(xyz, feats, centers, perm, 0.6, mlp)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_default_stage_shapes():
    cfg = BackboneConfig()
    assert (cfg.n_points, *cfg.stage_sizes) == (1024, 256, 128, 64, 32)
    for a, b in zip(cfg.stage_sizes, cfg.stage_sizes[1:]):
        assert a == 2 * b


def test_paper_scale_cascade():
    cfg = paper_scale_config()
    assert (cfg.n_points, *cfg.stage_sizes) == (8192, 2048, 1024, 512, 256)


def test_config_rejects_non_decreasing():
    sa = (SAStage(64, 0.3, 8, (8,)), SAStage(64, 0.5, 8, (8,)), SAStage(32, 1, 8, (8,)), SAStage(16, 2, 8, (8,)))
    with pytest.raises(ValueError):
        BackboneConfig(n_points=128, sa=sa)


def small_cfg(n=64):
    sa = (
        SAStage(n // 2, 0.4, 6, (8,)),
        SAStage(n // 4, 0.8, 6, (8,)),
        SAStage(n // 8 + 2, 1.2, 6, (8,)),
        SAStage(n // 8, 2.0, 6, (8,)),
    )
    return BackboneConfig(n_points=n, sa=sa, fp=((8,), (8,)))


def test_backbone_shapes_and_shared_indices():
    cfg = small_cfg()
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(64, 10))
    other = pts.copy()
    other[:, :3] = other[:, :3] @ np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    net = Backbone(ParamStore(0), cfg)
    out = net(np.stack([pts, other]))
    assert out.f1.shape == (2, 32, 8) and out.f2_raw.shape == (2, 16, 8) and out.base.shape == (2, 16, 8)
    ref = build_plan(pts[:, :3], cfg)
    for a, b in zip(out.plan.sample_indices, ref.sample_indices):
        np.testing.assert_array_equal(a, b)


def test_backbone_rejects_bad_input():
    net = Backbone(ParamStore(0), small_cfg())
    with pytest.raises(T.ShapeError):
        net(np.zeros((1, 64, 9)))


def test_absolute_indices_compose():
    xyz = np.random.default_rng(0).uniform(size=(64, 3))
    plan = build_plan(xyz, small_cfg())
    np.testing.assert_array_equal(plan.stage_xyz[2], xyz[plan.absolute_indices(2)])
