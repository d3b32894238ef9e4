"""Scene-level MIL loss, pseudo labels, self-training and consistency losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_CLAMP = 1e-12


class TrainingAbort(RuntimeError):
    """A loss term became non-finite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


def scene_pool(u_seg: Tensor) -> Tensor:
    """Average-pool per-point logits over points, then sigmoid: ``(N, C) -> (C,)``."""
    return T.sigmoid(T.reduce_mean(u_seg, axis=0))


def mil_loss(sigma: Tensor, y: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over classes, probabilities clamped away from 0 and 1."""
    y = np.asarray(y, dtype=np.float64)
    # the clamped log floors both sigma and 1 - sigma at PROB_CLAMP
    pos = T.log(sigma)
    neg = T.log(T.sub(Tensor(1.0), sigma))
    terms = T.add(T.mul(Tensor(y), pos), T.mul(Tensor(1.0 - y), neg))
    return T.scale(T.reduce_sum(terms), -1.0)


@dataclass
class PseudoLabels:
    y_hat: np.ndarray  # (N, C) one-hot or zero rows

    @property
    def labeled(self) -> np.ndarray:
        return self.y_hat.sum(axis=1) > 0

    @property
    def coverage(self) -> float:
        return float(self.labeled.mean()) if self.y_hat.shape[0] else 0.0

    @property
    def classes(self) -> np.ndarray:
        """Assigned class per point, -1 where ignored."""
        return np.where(self.labeled, self.y_hat.argmax(axis=1), -1)


def masked_softmax(logits: np.ndarray, scene_labels: np.ndarray) -> np.ndarray:
    present = np.asarray(scene_labels).astype(bool)
    z = np.where(present, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def generate_pseudo_labels(u_refined, scene_labels: np.ndarray, tau: float = 0.7) -> PseudoLabels:
    """One-hot at the arg-max over scene-present classes when its probability >= tau."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    if not np.any(scene_labels):
        raise ValueError("scene has no positive class")
    logits = u_refined.data if isinstance(u_refined, Tensor) else np.asarray(u_refined, dtype=np.float64)
    prob = masked_softmax(logits, scene_labels)
    best = np.argmax(prob, axis=1)  # ties -> lowest class id
    keep = prob[np.arange(best.size), best] >= tau
    y_hat = np.zeros_like(prob)
    y_hat[np.flatnonzero(keep), best[keep]] = 1.0
    return PseudoLabels(y_hat)


def self_training_loss(s_seg: Tensor, labels: PseudoLabels) -> Tensor:
    """Cross-entropy of the student over labeled points, averaged over labeled points."""
    n_labeled = int(labels.labeled.sum())
    if n_labeled == 0:
        return Tensor(0.0)
    logp = T.log(T.softmax(s_seg, axis=-1))
    picked = T.reduce_sum(T.mul(Tensor(labels.y_hat), logp))
    return T.scale(picked, -1.0 / n_labeled)


def consistency_loss(u_refined: Tensor, u_geo_refined: Tensor) -> Tensor:
    """Mean over points of the L1 distance between the two streams' logits."""
    if u_refined.shape != u_geo_refined.shape:
        raise T.ShapeError(f"consistency: {u_refined.shape} vs {u_geo_refined.shape}")
    diff = T.abs(T.sub(u_refined, u_geo_refined))
    return T.scale(T.reduce_sum(diff), 1.0 / u_refined.shape[0])


def total_loss(parts: dict[str, Tensor]) -> Tensor:
    """Unweighted sum; raises :class:`TrainingAbort` naming the first non-finite part."""
    total = None
    for name, part in parts.items():
        value = float(np.asarray(part.data).reshape(-1)[0])
        if not math.isfinite(value):
            raise TrainingAbort(name, value)
        total = part if total is None else T.add(total, part)
    if total is None:
        raise ValueError("no loss terms")
    return total
