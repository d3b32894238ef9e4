"""Seeded ablation runs on the default synthetic dataset, cached as JSON."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ABLATIONS, DeskPreset, TrainConfig, apply_ablation
from .scenes import Dataset
from .trainer import data_signature, fit

SEEDS = (0, 1, 2)
DEFAULT_CACHE = Path(__file__).resolve().parents[2] / "results" / "runs"

# variants beyond the ablation table: keyed the same way as ABLATIONS
VARIANTS = {"full-no-ncw": ("full", dict(ncw_enabled=False))}


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        if p.name in ("cli.py", "experiments.py", "__main__.py"):
            continue
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def variant_config(name: str, seed: int, **overrides) -> TrainConfig:
    if name in VARIANTS:
        base, extra = VARIANTS[name]
        cfg = replace(apply_ablation(TrainConfig(), base), **extra)
    else:
        cfg = apply_ablation(TrainConfig(), name)
    return replace(cfg, seed=seed, **overrides)


def desk_dataset(preset: DeskPreset = DeskPreset()) -> Dataset:
    return Dataset.generate(preset.seed, preset.n_train, preset.n_eval)


def run_key(cfg: TrainConfig, dataset: Dataset) -> str:
    return hashlib.sha256((cfg.to_text() + data_signature(dataset.manifest) + _source_hash()).encode()).hexdigest()[:20]


def run_variant(name: str, seed: int, dataset: Dataset, cache_dir=DEFAULT_CACHE, progress=None, **overrides) -> dict:
    """Train one (variant, seed) pair or return its cached summary."""
    cfg = variant_config(name, seed, **overrides)
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{name}-s{seed}-{run_key(cfg, dataset)}.json"
    if path.exists():
        return json.loads(path.read_text())
    t0 = time.perf_counter()
    result = fit(dataset, cfg, progress=progress)
    report = result.best_metrics
    summary = {
        "variant": name,
        "seed": seed,
        "config": cfg.to_text(),
        "seconds": time.perf_counter() - t0,
        "pseudo_absent": result.pseudo_absent,
        "log": result.log,
        **report.as_dict(),
    }
    cache_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=1, default=float))
    return summary


def aggregate(runs: list[dict]) -> dict:
    """Mean over seeds of the headline and tier metrics."""
    out = {"miou": float(np.mean([r["miou"] for r in runs])), "map": float(np.mean([r["map"] for r in runs]))}
    for key in ("tier_miou", "tier_map"):
        out[key] = {t: float(np.nanmean([r[key][t] for r in runs])) for t in runs[0][key]}
    out["seeds"] = [r["seed"] for r in runs]
    return out


def known_variants() -> list[str]:
    return list(ABLATIONS) + list(VARIANTS)
