"""Thresholded cosine affinity across modality streams and logit refinement.

The affinity is a constant smoothing operator per step: it is computed from
detached feature values and never receives gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_FLOOR = 1e-12


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def multiscale_features(f1, f2_up, f_u) -> np.ndarray:
    """Concatenate per-point features of several scales along the channel axis."""
    return np.concatenate([_values(f1), _values(f2_up), _values(f_u)], axis=-1)


def build_multimodal_bank(f_rgb, f_geo) -> np.ndarray:
    """Row-stack the RGB-appended and geometry-only features: ``(2 N1, D)``."""
    a, b = _values(f_rgb), _values(f_geo)
    if a.ndim != 2 or a.shape != b.shape:
        raise T.ShapeError(f"bank halves must be equal-shape matrices, got {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=0)


@dataclass
class AffinityMatrix:
    A: np.ndarray
    theta: float

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def row_normalized(self) -> np.ndarray:
        return self.A / self.A.sum(axis=1, keepdims=True)


def cosine_matrix(bank: np.ndarray) -> np.ndarray:
    bank = _values(bank)
    norms = np.maximum(np.linalg.norm(bank, axis=1, keepdims=True), NORM_FLOOR)
    unit = bank / norms
    cos = unit @ unit.T
    return 0.5 * (cos + cos.T)


def compute_affinity(bank, theta: float = 0.3) -> AffinityMatrix:
    """``A[i, j] = max(theta, cos(bank_i, bank_j))`` with an exact unit diagonal."""
    if not 0.0 <= theta < 1.0:
        raise ValueError(f"theta must lie in [0, 1), got {theta}")
    a = np.clip(cosine_matrix(bank), theta, 1.0)
    np.fill_diagonal(a, 1.0)
    return AffinityMatrix(a, float(theta))


def refine_logits(aff: AffinityMatrix, u: Tensor, u_geo: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """Row-normalized affinity times the stacked logits, split back per stream."""
    stacked = u if u_geo is None else T.concat([u, u_geo], axis=0)
    n = u.shape[0]
    if aff.size != stacked.shape[0] or (u_geo is not None and u_geo.shape != u.shape):
        raise T.ShapeError(f"affinity {aff.A.shape} does not match stacked logits {stacked.shape}")
    a_hat = aff.row_normalized()
    if u_geo is None:
        return T.matmul(Tensor(a_hat), stacked), None
    top = T.matmul(Tensor(a_hat[:n]), stacked)
    bottom = T.matmul(Tensor(a_hat[n:]), stacked)
    return top, bottom


def class_affinity_gap(a: np.ndarray, labels: np.ndarray) -> float:
    """Mean within-class minus mean between-class off-diagonal affinity."""
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(labels.size, dtype=bool)
    within, between = same & off, ~same
    if not within.any() or not between.any():
        return float("nan")
    return float(a[within].mean() - a[between].mean())


# ------------------------------------------------------------------- export

EXPORT_MAGIC = b"MMAAFF1\n"


def write_affinity_export(path, affinity: np.ndarray, relation: np.ndarray) -> None:
    """Little-endian: magic, (u32 rows, u32 cols, f32 data) for A, then the same with u8 for the map."""
    a = np.asarray(affinity)
    m = np.asarray(relation)
    blob = b"".join(
        [
            EXPORT_MAGIC,
            struct.pack("<II", *a.shape),
            a.astype("<f4").tobytes(),
            struct.pack("<II", *m.shape),
            m.astype("u1").tobytes(),
        ]
    )
    Path(path).write_bytes(blob)


def read_affinity_export(path) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(EXPORT_MAGIC):
        raise ValueError("not an affinity export (bad magic)")
    off = len(EXPORT_MAGIC)
    r, c = struct.unpack_from("<II", blob, off)
    off += 8
    a = np.frombuffer(blob, "<f4", r * c, off).reshape(r, c).astype(np.float64)
    off += 4 * r * c
    r2, c2 = struct.unpack_from("<II", blob, off)
    off += 8
    m = np.frombuffer(blob, "u1", r2 * c2, off).reshape(r2, c2).copy()
    return a, m
