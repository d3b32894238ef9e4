import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmaseg import tensor as T
from mmaseg.affinity import (
    AffinityMatrix,
    build_multimodal_bank,
    class_affinity_gap,
    compute_affinity,
    cosine_matrix,
    multiscale_features,
    read_affinity_export,
    refine_logits,
    write_affinity_export,
)
from mmaseg.tensor import Tensor

seeds = st.integers(0, 2**31 - 1)
thetas = st.floats(0.0, 0.99)


def cosine_oracle(bank):
    n = len(bank)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            a, b = bank[i], bank[j]
            out[i, j] = float(a @ b) / (max(np.sqrt(a @ a), 1e-12) * max(np.sqrt(b @ b), 1e-12))
    return out


def test_bank_layout():
    f = np.arange(6.0).reshape(3, 2)
    g = -f
    bank = build_multimodal_bank(f, g)
    np.testing.assert_array_equal(bank[:3], f)
    np.testing.assert_array_equal(bank[3:], g)
    np.testing.assert_array_equal(build_multimodal_bank(f, f)[3:], f)


def test_bank_mismatch():
    with pytest.raises(T.ShapeError):
        build_multimodal_bank(np.zeros((3, 2)), np.zeros((3, 4)))


def test_multiscale_width():
    f = multiscale_features(np.zeros((5, 32)), np.zeros((5, 64)), np.zeros((5, 128)))
    assert f.shape == (5, 32 + 64 + 128)


def test_identical_rows_give_one():
    a = compute_affinity(np.array([[1.0, 2.0], [2.0, 4.0]]), 0.3).A
    assert a[0, 1] == pytest.approx(1.0, abs=1e-15)


def test_orthogonal_rows_floor():
    a = compute_affinity(np.eye(3), 0.3).A
    np.testing.assert_array_equal(a, np.where(np.eye(3) > 0, 1.0, 0.3))


def test_theta_out_of_range():
    with pytest.raises(ValueError):
        compute_affinity(np.eye(2), 1.0)


def test_zero_rows_guarded():
    a = compute_affinity(np.zeros((3, 4)), 0.2).A
    assert np.all(np.isfinite(a))


def test_identity_affinity_leaves_logits():
    aff = compute_affinity(np.eye(4), 0.0)
    u = np.random.default_rng(0).normal(size=(2, 3))
    top, bottom = refine_logits(aff, Tensor(u), Tensor(-u))
    np.testing.assert_allclose(top.data, u, atol=1e-15)
    np.testing.assert_allclose(bottom.data, -u, atol=1e-15)


def test_two_point_closed_form():
    a = np.full((3, 3), 0.3)
    np.fill_diagonal(a, 1.0)
    a[0, 1] = a[1, 0] = 1.0
    u = np.array([[2.0], [0.0], [10.0]])
    (top, _) = refine_logits(AffinityMatrix(a, 0.3), Tensor(u))
    np.testing.assert_allclose(top.data[:, 0], [(2 + 0 + 3) / 2.3, (2 + 0 + 3) / 2.3, (0.6 + 10) / 1.6])


def test_refine_shape_mismatch():
    with pytest.raises(T.ShapeError):
        refine_logits(compute_affinity(np.eye(4)), Tensor(np.zeros((3, 2))))


def test_affinity_is_constant_for_backward():
    u = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    aff = compute_affinity(np.random.default_rng(1).normal(size=(3, 4)))
    (g,) = T.grad_of(lambda: T.reduce_sum(refine_logits(aff, u)[0]), [u])
    np.testing.assert_allclose(g, aff.row_normalized().sum(axis=0)[:, None].repeat(2, 1), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), seeds)
def test_cosine_matches_oracle(n, d, seed):
    bank = np.random.default_rng(seed).normal(size=(n, d))
    np.testing.assert_allclose(cosine_matrix(bank), cosine_oracle(bank), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), thetas, seeds)
def test_affinity_structure(n, d, theta, seed):
    bank = np.random.default_rng(seed).normal(size=(2 * n, d))
    a = compute_affinity(bank, theta).A
    assert np.max(np.abs(a - a.T)) <= 1e-9
    assert np.all(np.diag(a) == 1.0)
    assert np.all((a >= theta) & (a <= 1.0))
    np.testing.assert_allclose(a, np.maximum(theta, np.clip(cosine_oracle(bank), -1, 1)) * (1 - np.eye(2 * n)) + np.eye(2 * n), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(1, 5), thetas, seeds)
def test_refinement_is_rowwise_convex(n, c, theta, seed):
    rng = np.random.default_rng(seed)
    aff = compute_affinity(rng.normal(size=(2 * n, 4)), theta)
    u, ug = rng.normal(size=(n, c)), rng.normal(size=(n, c))
    top, bottom = refine_logits(aff, Tensor(u), Tensor(ug))
    stacked = np.concatenate([u, ug])
    for out in (top.data, bottom.data):
        assert np.all(out >= stacked.min(0) - 1e-12) and np.all(out <= stacked.max(0) + 1e-12)
    np.testing.assert_allclose(aff.row_normalized().sum(1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), seeds)
def test_cross_modality_mixing(n, seed):
    rng = np.random.default_rng(seed)
    f = np.abs(rng.normal(size=(n, 3)))
    aff = compute_affinity(build_multimodal_bank(f, f), 0.3)
    u = rng.normal(size=(n, 2))
    a, _ = refine_logits(aff, Tensor(u), Tensor(u))
    b, _ = refine_logits(aff, Tensor(u), Tensor(u + 1.0))
    assert not np.allclose(a.data, b.data)


def test_class_affinity_gap():
    a = np.array([[1.0, 0.9, 0.2], [0.9, 1.0, 0.3], [0.2, 0.3, 1.0]])
    assert class_affinity_gap(a, np.array([0, 0, 1])) == pytest.approx(0.9 - 0.25)
    assert np.isnan(class_affinity_gap(a, np.array([0, 1, 2])))


def test_export_round_trip(tmp_path):
    a = compute_affinity(np.random.default_rng(0).normal(size=(6, 3))).A
    m = (np.arange(36).reshape(6, 6) % 2).astype(np.uint8)
    p = tmp_path / "aff.bin"
    write_affinity_export(p, a, m)
    a2, m2 = read_affinity_export(p)
    np.testing.assert_array_equal(a2, a.astype(np.float32))
    np.testing.assert_array_equal(m2, m)
    blob = p.read_bytes()
    write_affinity_export(p, a2, m2)
    assert p.read_bytes() == blob


def test_export_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope" * 4)
    with pytest.raises(ValueError):
        read_affinity_export(p)
