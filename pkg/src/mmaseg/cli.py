"""Command-line entry point: ``mmaseg {gen,train,eval,ablate,affinity-export}``.

Failures exit nonzero with one line on stderr: ``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .affinity import write_affinity_export
from .config import ABLATIONS, ConfigError, DeskPreset, TrainConfig, apply_ablation, parse_kv
from .metrics import class_relationship_map
from .objectives import TrainingAbort
from .scenes import Dataset, DatasetFormatError, config_with_classes, generate_dataset, mask_rgb, write_dataset
from .trainer import (
    Checkpoint,
    CheckpointFormatError,
    IncompatibleCheckpointError,
    Trainer,
    fit,
)


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("unwritable-path", f"{out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise CliError("unwritable-path", f"{out}: not writable")
    return out


def _load_dataset(path) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-data", f"dataset file not found: {p}")
    try:
        return Dataset.load(p)
    except DatasetFormatError as exc:
        raise CliError("bad-data", str(exc)) from None


def _load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-checkpoint", f"checkpoint not found: {p}")
    try:
        return Checkpoint.load(p)
    except CheckpointFormatError as exc:
        raise CliError("bad-checkpoint", str(exc)) from None


def resolve_config(config_file=None, overrides=(), ablation=None, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults, then the ablation preset, then the file, then ``--set`` overrides."""
    cfg = TrainConfig() if base is None else base
    try:
        if ablation is not None:
            cfg = apply_ablation(cfg, ablation)
        if config_file is not None:
            text = Path(config_file).read_text(encoding="utf-8")
            cfg = TrainConfig.from_mapping(parse_kv(text), cfg)
        if overrides:
            cfg = TrainConfig.from_mapping(parse_kv("\n".join(overrides)), cfg)
    except ConfigError as exc:
        raise CliError("config", str(exc)) from None
    except OSError as exc:
        raise CliError("config", f"cannot read config file: {exc}") from None
    return cfg


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if args.scenes < 1 or args.eval_scenes < 0 or args.points < 1 or args.classes < 1:
        raise CliError("invalid-count", "scenes >= 1, eval-scenes >= 0, points >= 1 and classes >= 1 required")
    try:
        scene_cfg = config_with_classes(args.classes, n_points=args.points)
        scenes, manifest = generate_dataset(args.seed, args.scenes, args.eval_scenes, scene_cfg)
    except ValueError as exc:
        raise CliError("invalid-count", str(exc)) from None
    out = Path(args.out)
    _out_dir(out.parent if str(out.parent) else ".")
    try:
        write_dataset(scenes, manifest, out)
    except OSError as exc:
        raise CliError("unwritable-path", f"{out}: {exc.strerror}") from None
    for name, tier, count in zip(manifest.class_names, manifest.tiers, manifest.class_counts):
        print(f"{name}\t{tier}\t{count}")
    return 0


def cmd_train(args) -> int:
    data = _load_dataset(args.data)
    cfg = resolve_config(args.config, args.set, args.ablation)
    out = _out_dir(args.out)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    log_path = out / "metrics.jsonl"
    log_path.write_text("")

    def progress(row):
        with log_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")

    try:
        result = fit(data, cfg, progress=progress)
    except (TrainingAbort, T.BackwardError) as exc:
        raise CliError("training-abort", str(exc)) from None
    result.best.save(out / "best.ckpt")
    result.last.save(out / "last.ckpt")
    report = result.best_metrics.to_text()
    (out / "report.txt").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def restore_trainer(ckpt: Checkpoint, data: Dataset) -> Trainer:
    """Rebuild a trainer from the checkpoint's echoed config, checking compatibility with ``data``."""
    try:
        cfg = TrainConfig.from_text(ckpt.config_text)
    except ConfigError as exc:
        raise CliError("bad-checkpoint", str(exc)) from None
    w = ckpt.params.get("teacher.cls.weight")
    if w is not None and w.shape[1] != data.manifest.n_classes:
        raise CliError(
            "incompatible-checkpoint",
            f"checkpoint has {w.shape[1]} classes but dataset has {data.manifest.n_classes}",
        )
    tr = Trainer(cfg, data.manifest)
    try:
        tr.restore(ckpt)
    except (IncompatibleCheckpointError, KeyError) as exc:
        raise CliError("incompatible-checkpoint", str(exc)) from None
    return tr


def cmd_eval(args) -> int:
    data = _load_dataset(args.data)
    ckpt = _load_checkpoint(args.checkpoint)
    report = restore_trainer(ckpt, data).evaluate(data)
    text = report.to_text()
    out = _out_dir(args.out)
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    data = _load_dataset(args.data)
    out = _out_dir(args.out)
    ids = args.ablations or list(ABLATIONS)
    for a in ids:
        if a not in ABLATIONS:
            raise CliError("config", f"unknown ablation {a!r}; valid ids: {', '.join(ABLATIONS)}")
    base = resolve_config(args.config, args.set)
    rows = ["ablation\trow\tseed\tmiou\tmap\thead_miou\tmedium_miou\ttail_miou"]
    for a in ids:
        for seed in args.seeds:
            cfg = replace(apply_ablation(base, a), seed=seed)
            run_dir = out / f"{a}-s{seed}"
            run_dir.mkdir(exist_ok=True)
            (run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
            result = fit(data, cfg)
            result.best.save(run_dir / "best.ckpt")
            rep = result.best_metrics
            (run_dir / "report.txt").write_text(rep.to_text(), encoding="utf-8")
            t = rep.tier_miou
            rows.append(
                f"{a}\t{ABLATIONS[a][0]}\t{seed}\t{rep.miou:.6f}\t{rep.map:.6f}\t"
                f"{t['head']:.6f}\t{t['medium']:.6f}\t{t['tail']:.6f}"
            )
            print(rows[-1], flush=True)
    (out / "ablation.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def cmd_affinity_export(args) -> int:
    data = _load_dataset(args.data)
    ckpt = _load_checkpoint(args.checkpoint)
    tr = restore_trainer(ckpt, data)
    if not 0 <= args.scene < len(data.scenes):
        raise CliError("invalid-count", f"scene index {args.scene} outside [0, {len(data.scenes)})")
    cfg = tr.cfg
    scene = data.scenes[args.scene]
    with T.no_grad():
        plan = tr.plan(args.scene, scene)
        streams = [scene.points]
        if cfg.multimodal_enabled:
            streams.append(mask_rgb(scene).points)
        out_s = tr.model.teacher_streams(np.stack(streams), plan)
        aff = tr.model.affinity(out_s, cfg.theta, cfg.multiscale_enabled, cfg.multimodal_enabled)
        pred, _, _ = tr.model.predict(scene.points, plan)
    out = _out_dir(args.out)
    path = out / f"affinity-scene{args.scene}.bin"
    write_affinity_export(path, aff.A, class_relationship_map(pred))
    print(path)
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmaseg", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default MMA_THREADS or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    preset = DeskPreset()

    g = sub.add_parser("gen", help="generate a synthetic dataset file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=preset.seed)
    g.add_argument("--scenes", type=int, default=preset.n_train, help="training scenes")
    g.add_argument("--eval-scenes", type=int, default=preset.n_eval)
    g.add_argument("--points", type=int, default=preset.n_points)
    g.add_argument("--classes", type=int, default=preset.n_classes)
    g.set_defaults(func=cmd_gen)

    def run_opts(p):
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    t = sub.add_parser("train", help="train one configuration")
    run_opts(t)
    t.add_argument("--ablation", default=None, help=f"one of: {', '.join(ABLATIONS)}")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the ablation grid and write a combined table")
    run_opts(a)
    a.add_argument("--ablations", nargs="+", default=None)
    a.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("affinity-export", help="write A and the class-relationship map for one scene")
    x.add_argument("--data", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--scene", type=int, default=0)
    x.set_defaults(func=cmd_affinity_export)
    return ap


def _threads(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("MMA_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError("config", f"MMA_THREADS must be an integer, got {env!r}") from None
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        n = _threads(args.threads)
        if n < 1:
            raise CliError("config", "--threads must be >= 1")
        with threadpool_limits(limits=n):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
