import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmaseg.scenes import (
    HEIGHT,
    MAGIC,
    N_COLUMNS,
    NORMAL,
    RGB,
    XYZ,
    BadMagicError,
    ClassSpec,
    CountMismatchError,
    Dataset,
    TruncatedError,
    class_point_counts,
    config_with_classes,
    decode_dataset,
    default_config,
    encode_dataset,
    generate_dataset,
    generate_scene,
    horizontal_transform,
    mask_rgb,
    read_dataset,
    write_dataset,
)
from mmaseg.metrics import tier_split

seeds = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def desk():
    return generate_dataset(0, 200, 0)


def test_scene_deterministic():
    a, b = generate_scene(1), generate_scene(1)
    assert a.points.tobytes() == b.points.tobytes()
    assert np.array_equal(a.point_labels, b.point_labels)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_scene_invariants(seed):
    s = generate_scene(seed)
    assert s.points.shape == (1024, 10)
    np.testing.assert_allclose(np.linalg.norm(s.points[:, NORMAL], axis=1), 1.0, atol=1e-6)
    assert np.all((s.points[:, RGB] >= 0) & (s.points[:, RGB] <= 1))
    np.testing.assert_allclose(s.points[:, HEIGHT], s.points[:, 2] - s.floor_z, atol=1e-9)
    present = np.zeros(s.scene_labels.size, dtype=np.uint8)
    present[np.unique(s.point_labels)] = 1
    np.testing.assert_array_equal(s.scene_labels, present)
    assert s.scene_labels[0] == 1 and s.scene_labels[1] == 1
    assert np.all(s.points.astype(np.float32).astype(np.float64) == s.points)


def test_long_tail_shares(desk):
    scenes, manifest = desk
    counts = np.array(manifest.class_counts)
    np.testing.assert_array_equal(counts, class_point_counts(scenes, 6))
    share = counts / counts.sum()
    assert share[0] > 0.25
    assert share.min() < 0.03
    assert counts[:2].min() >= 8 * counts[4:].max()


def test_default_tiers(desk):
    assert tier_split(desk[1]) == ["head", "head", "medium", "medium", "tail", "tail"]


def test_missing_tail_object_label_zero(desk):
    scenes, _ = desk
    missing = [s for s in scenes if s.scene_labels[4] == 0]
    assert missing
    assert all(np.all(s.point_labels != 4) for s in missing)


def test_config_validation():
    cfg = default_config()
    with pytest.raises(ValueError):
        generate_scene(0, default_config(n_points=128))
    no_head = tuple(ClassSpec(c.name, c.geometry, c.color, "medium", 0.5, 40) for c in cfg.classes[2:])
    with pytest.raises(ValueError):
        generate_scene(0, default_config(classes=no_head))
    with pytest.raises(ValueError):
        config_with_classes(3)


def test_mask_rgb():
    s = generate_scene(3)
    m = mask_rgb(s)
    assert np.all(m.points[:, RGB] == 0)
    assert m.points[:, XYZ].tobytes() == s.points[:, XYZ].tobytes()
    assert m.points[:, 6:].tobytes() == s.points[:, 6:].tobytes()
    assert mask_rgb(m).points.tobytes() == m.points.tobytes()


def test_identity_transform():
    s = generate_scene(4)
    assert horizontal_transform(s, angle=0.0, mirror=False).points.tobytes() == s.points.tobytes()


@settings(max_examples=15, deadline=None)
@given(seeds, seeds)
def test_transform_is_rigid(scene_seed, t_seed):
    s = generate_scene(scene_seed)
    t = horizontal_transform(s, t_seed)
    d0 = np.linalg.norm(s.points[:, None, :3] - s.points[None, :, :3], axis=-1)
    d1 = np.linalg.norm(t.points[:, None, :3] - t.points[None, :, :3], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-9)
    np.testing.assert_array_equal(t.point_labels, s.point_labels)
    assert t.points[:, RGB].tobytes() == s.points[:, RGB].tobytes()
    assert t.points[:, HEIGHT].tobytes() == s.points[:, HEIGHT].tobytes()
    np.testing.assert_allclose(np.linalg.norm(t.points[:, NORMAL], axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(t.points[:, 2], s.points[:, 2], atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(seeds, seeds)
def test_mask_commutes_with_transform(scene_seed, t_seed):
    s = generate_scene(scene_seed)
    a = mask_rgb(horizontal_transform(s, t_seed))
    b = horizontal_transform(mask_rgb(s), t_seed)
    assert a.points.tobytes() == b.points.tobytes()


def test_round_trip_bitwise(tmp_path):
    scenes, manifest = generate_dataset(7, 3, 2, default_config(n_points=512))
    p = tmp_path / "d.mma"
    write_dataset(scenes, manifest, p)
    blob = p.read_bytes()
    back, man2 = read_dataset(p)
    assert man2 == manifest
    for a, b in zip(scenes, back):
        assert a.points.tobytes() == b.points.tobytes()
        np.testing.assert_array_equal(a.point_labels, b.point_labels)
        np.testing.assert_array_equal(a.scene_labels, b.scene_labels)
    write_dataset(back, man2, p)
    assert p.read_bytes() == blob


def test_bad_magic():
    scenes, manifest = generate_dataset(0, 1, 0, default_config(n_points=512))
    blob = bytearray(encode_dataset(scenes, manifest))
    blob[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        decode_dataset(bytes(blob))


def test_truncated_header_claims_more_points():
    scenes, manifest = generate_dataset(0, 1, 0, default_config(n_points=512))
    blob = encode_dataset(scenes, manifest)
    header = len(MAGIC) + 12
    assert struct.unpack_from("<I", blob, len(MAGIC) + 4)[0] == 512
    with pytest.raises(TruncatedError):
        decode_dataset(blob[: header + 256 * (N_COLUMNS * 4 + 2) + 6])


def test_count_mismatch():
    scenes, manifest = generate_dataset(0, 2, 0, default_config(n_points=512))
    blob = bytearray(encode_dataset(scenes, manifest))
    struct.pack_into("<I", blob, len(MAGIC), 1)
    with pytest.raises(CountMismatchError):
        decode_dataset(bytes(blob))


def test_empty_write_rejected(tmp_path):
    _, manifest = generate_dataset(0, 1, 0, default_config(n_points=512))
    with pytest.raises(ValueError):
        write_dataset([], manifest, tmp_path / "x")


def test_dataset_splits():
    ds = Dataset.generate(0, 3, 2, default_config(n_points=512))
    assert len(ds.train) == 3 and len(ds.eval) == 2
    assert ds.manifest.n_eval == 2
