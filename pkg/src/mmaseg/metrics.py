"""Segmentation IoU, scene-level AP and head/medium/tail aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenes import DatasetManifest

TIER_NAMES = ("head", "medium", "tail")


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction length {pred.shape} != ground truth length {truth.shape}")
    return np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def evaluate_segmentation(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Confusion matrix, per-class IoU (NaN when a class is absent from both) and mIoU."""
    conf = confusion_matrix(pred, truth, n_classes)
    iou = iou_from_confusion(conf)
    valid = ~np.isnan(iou)
    return conf, iou, float(iou[valid].mean()) if valid.any() else float("nan")


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Non-interpolated AP: scenes ranked by descending score, ties by scene index."""
    positives = np.asarray(positives).astype(bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        return float("nan")
    order = np.lexsort((np.arange(scores.size), -np.asarray(scores, dtype=np.float64)))
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.mean())


def scene_map(sigmas: np.ndarray, scene_labels: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Per-class AP over scenes plus warning records for classes with no positives."""
    sigmas = np.asarray(sigmas)
    labels = np.asarray(scene_labels)
    ap = np.array([average_precision(sigmas[:, c], labels[:, c]) for c in range(labels.shape[1])])
    warnings = [f"class {c} has no positive scene; excluded from mAP" for c in np.flatnonzero(np.isnan(ap))]
    return ap, warnings


def tier_split(
    manifest: DatasetManifest | np.ndarray | list,
    head_ratio: float = 8.0,
    tail_ratio: float = 2.0,
) -> list[str]:
    """Tier per class from training point counts relative to the rarest class."""
    counts = np.asarray(manifest.class_counts if isinstance(manifest, DatasetManifest) else manifest, dtype=np.float64)
    if counts.size < len(TIER_NAMES):
        raise ValueError(f"need at least {len(TIER_NAMES)} classes to form tiers, got {counts.size}")
    lo = counts.min()
    if counts.max() == lo:
        return ["medium"] * counts.size
    tiers = []
    for c in counts:
        if c > head_ratio * lo:
            tiers.append("head")
        elif c < tail_ratio * lo:
            tiers.append("tail")
        else:
            tiers.append("medium")
    return tiers


def class_relationship_map(pred: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred)
    return (pred[:, None] == pred[None, :]).astype(np.uint8)


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else float("nan")


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    per_class_ap: np.ndarray
    map: float
    tiers: list[str]
    tier_miou: dict[str, float] = field(default_factory=dict)
    tier_map: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"miou={_fmt(self.miou)}", f"map={_fmt(self.map)}"]
        for t in TIER_NAMES:
            lines.append(f"{t}_miou={_fmt(self.tier_miou.get(t, math.nan))}")
            lines.append(f"{t}_map={_fmt(self.tier_map.get(t, math.nan))}")
        lines.append("#CLASSES")
        lines.append("class\ttier\tiou\tap\tpoints")
        gt = self.confusion.sum(axis=1)
        for c, name in enumerate(self.class_names):
            lines.append(
                f"{name}\t{self.tiers[c]}\t{_fmt(self.per_class_iou[c])}\t{_fmt(self.per_class_ap[c])}\t{int(gt[c])}"
            )
        lines.extend(f"#warning {w}" for w in self.warnings)
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {
            "miou": self.miou,
            "map": self.map,
            "tier_miou": dict(self.tier_miou),
            "tier_map": dict(self.tier_map),
            "per_class_iou": [float(v) for v in self.per_class_iou],
            "per_class_ap": [float(v) for v in self.per_class_ap],
        }


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{float(v):.6f}"


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.startswith("#"):
            break
        k, _, v = line.partition("=")
        out[k] = float(v)
    return out


def build_report(
    pred: np.ndarray,
    truth: np.ndarray,
    sigmas: np.ndarray,
    scene_labels: np.ndarray,
    tiers: list[str],
    class_names,
) -> MetricsReport:
    n_classes = len(class_names)
    conf, iou, miou = evaluate_segmentation(pred, truth, n_classes)
    ap, warnings = scene_map(sigmas, scene_labels)
    tiers = list(tiers)
    tier_miou, tier_map = {}, {}
    for t in TIER_NAMES:
        members = [c for c in range(n_classes) if tiers[c] == t]
        tier_miou[t] = _nanmean(iou[members]) if members else math.nan
        tier_map[t] = _nanmean(ap[members]) if members else math.nan
    return MetricsReport(tuple(class_names), conf, iou, miou, ap, _nanmean(ap), tiers, tier_miou, tier_map, warnings)
