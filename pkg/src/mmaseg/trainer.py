"""Deterministic two-stream training loop, AdamW and checkpoint files."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .metrics import MetricsReport, build_report, tier_split
from .model import MMAModel, refine_streams
from .objectives import (
    consistency_loss,
    generate_pseudo_labels,
    mil_loss,
    scene_pool,
    self_training_loss,
    total_loss,
)
from .scenes import Dataset, DatasetManifest, LabeledScene, horizontal_transform, mask_rgb, random_horizontal
from .backbone import SamplingPlan, build_plan

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ AdamW


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, T.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """Decoupled-weight-decay Adam update with bias-corrected moments, in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise T.ShapeError(f"adamw: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        if m.shape != p.shape or v.shape != p.shape:
            raise T.ShapeError(f"adamw: moment shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr0 * cfg.lr_decay_factor**drops


# ------------------------------------------------------------- train step


@dataclass
class StepRecord:
    mil: float
    self_refined: float
    consist: float
    total: float
    coverage: float
    absent_assignments: int = 0


class Trainer:
    """Owns the model, optimizer state and per-scene sampling plans."""

    def __init__(self, cfg: TrainConfig, manifest: DatasetManifest):
        self.cfg = cfg
        self.manifest = manifest
        self.model = MMAModel(cfg.backbone(manifest.n_points), cfg.heads(), manifest.n_classes, cfg.seed)
        self.opt = AdamState()
        self.epoch = 0
        self._plans: dict[int, SamplingPlan] = {}
        self.pseudo_hook = None  # optional callable(scene, PseudoLabels) for audits

    def plan(self, key: int, scene: LabeledScene) -> SamplingPlan:
        p = self._plans.get(key)
        if p is None:
            p = self._plans[key] = build_plan(scene.points[:, :3], self.model.backbone_cfg)
        return p

    def scene_loss(self, scene: LabeledScene, plan: SamplingPlan, transform_seed: int, epoch: int):
        """Forward both streams and assemble the loss terms for one scene."""
        cfg = self.cfg
        streams = [scene.points]
        if cfg.multimodal_enabled:
            angle, mirror = random_horizontal(transform_seed)
            streams.append(horizontal_transform(mask_rgb(scene), angle=angle, mirror=mirror).points)
        out = self.model.teacher_streams(np.stack(streams), plan)
        u0 = T.select(out.u_seg, 0)
        parts = {"mil": mil_loss(scene_pool(u0), scene.scene_labels)}

        aff = self.model.affinity(out, cfg.theta, cfg.multiscale_enabled, cfg.multimodal_enabled)
        u_ref, u_geo_ref = refine_streams(aff, out.u_seg, cfg.multimodal_enabled)
        pseudo = generate_pseudo_labels(u_ref, scene.scene_labels, cfg.tau)
        if epoch >= cfg.self_training_start:
            s_seg = self.model.student_logits(out.backbone.stream(0))
            parts["self_refined"] = self_training_loss(s_seg, pseudo)
        else:
            parts["self_refined"] = T.Tensor(0.0)
        if cfg.multimodal_enabled:
            parts["consist"] = consistency_loss(u_ref, u_geo_ref)
        else:
            parts["consist"] = T.Tensor(0.0)
        return parts, pseudo

    def train_step(self, batch: list[tuple[int, LabeledScene]], epoch: int, lr: float) -> StepRecord:
        """One optimizer step over ``batch`` of ``(scene_key, scene)``; loss is the batch mean."""
        if not batch:
            raise ValueError("empty batch")
        cfg = self.cfg
        self.model.zero_grad()
        sums = dict(mil=0.0, self_refined=0.0, consist=0.0, total=0.0, coverage=0.0)
        absent = 0
        for key, scene in batch:
            plan = self.plan(key, scene)
            seed = transform_seed(cfg.seed, epoch, key)
            with T.use_graph():
                parts, pseudo = self.scene_loss(scene, plan, seed, epoch)
                total = total_loss(parts)
                T.backward(T.scale(total, 1.0 / len(batch)))
            absent += int((pseudo.y_hat * (1 - scene.scene_labels)).sum())
            if self.pseudo_hook is not None:
                self.pseudo_hook(scene, pseudo)
            for k, v in parts.items():
                sums[k] += float(v.data)
            sums["total"] += float(total.data)
            sums["coverage"] += pseudo.coverage
        params = self.model.params
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise T.BackwardError(f"non-finite gradient for {k}")
        adamw_step(params, grads, self.opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        self.model.zero_grad()
        n = len(batch)
        return StepRecord(
            sums["mil"] / n, sums["self_refined"] / n, sums["consist"] / n, sums["total"] / n, sums["coverage"] / n, absent
        )

    def run_epoch(self, dataset: Dataset) -> list[StepRecord]:
        cfg = self.cfg
        epoch = self.epoch
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset.train))
        records = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            records.append(self.train_step([(int(i), dataset.train[i]) for i in idx], epoch, lr))
        self.epoch += 1
        return records

    def evaluate(self, dataset: Dataset) -> MetricsReport:
        offset = self.manifest.n_train
        preds, truths, sigmas, labels = [], [], [], []
        for j, scene in enumerate(dataset.eval):
            plan = self.plan(offset + j, scene)
            pred, sigma, _ = self.model.predict(scene.points, plan)
            preds.append(pred)
            truths.append(scene.point_labels[plan.absolute_indices(1)])
            sigmas.append(sigma)
            labels.append(scene.scene_labels)
        return build_report(
            np.concatenate(preds),
            np.concatenate(truths),
            np.array(sigmas),
            np.array(labels),
            tier_split(self.manifest),
            self.manifest.class_names,
        )

    # ------------------------------------------------------- checkpointing

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            params=self.model.state(),
            adam_m={k: v.copy() for k, v in self.opt.m.items()},
            adam_v={k: v.copy() for k, v in self.opt.v.items()},
            adam_step=self.opt.step,
            epoch=self.epoch,
            rng_state=np.array([self.cfg.seed, self.epoch], dtype=np.float64),
            config_hash=self.cfg.hash(data_signature(self.manifest)),
            config_text=self.cfg.to_text(),
        )

    def restore(self, ckpt: "Checkpoint") -> None:
        expected = self.cfg.hash(data_signature(self.manifest))
        if ckpt.config_hash != expected:
            raise IncompatibleCheckpointError("checkpoint config hash does not match config + dataset")
        self.model.load_state(ckpt.params)
        self.opt = AdamState(
            {k: v.copy() for k, v in ckpt.adam_m.items()}, {k: v.copy() for k, v in ckpt.adam_v.items()}, ckpt.adam_step
        )
        self.epoch = ckpt.epoch


def transform_seed(seed: int, epoch: int, key: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, key, 7]).generate_state(1)[0])


def data_signature(manifest: DatasetManifest) -> str:
    return f"points={manifest.n_points};classes={manifest.n_classes};names={','.join(manifest.class_names)}"


# ---------------------------------------------------------------------- fit


@dataclass
class FitResult:
    best: "Checkpoint"
    last: "Checkpoint"
    best_metrics: MetricsReport
    log: list[dict] = field(default_factory=list)
    pseudo_absent: int = 0


def fit(dataset: Dataset, cfg: TrainConfig, resume: "Checkpoint | None" = None, progress=None) -> FitResult:
    """Train for ``cfg.epochs``; evaluate every ``eval_every`` epochs and on the last one."""
    tr = Trainer(cfg, dataset.manifest)
    if resume is not None:
        tr.restore(resume)
    best_ckpt, best_report = None, None
    history: list[dict] = []
    absent = 0
    if tr.epoch >= cfg.epochs:
        best_ckpt, best_report = tr.checkpoint(), tr.evaluate(dataset)
    while tr.epoch < cfg.epochs:
        records = tr.run_epoch(dataset)
        absent += sum(r.absent_assignments for r in records)
        row = {
            "epoch": tr.epoch,
            "lr": lr_at(tr.epoch - 1, cfg),
            "mil": float(np.mean([r.mil for r in records])),
            "self_refined": float(np.mean([r.self_refined for r in records])),
            "consist": float(np.mean([r.consist for r in records])),
            "total": float(np.mean([r.total for r in records])),
            "coverage": float(np.mean([r.coverage for r in records])),
        }
        if tr.epoch % cfg.eval_every == 0 or tr.epoch == cfg.epochs:
            report = tr.evaluate(dataset)
            row["miou"] = report.miou
            row["map"] = report.map
            if best_report is None or report.miou > best_report.miou:
                best_report, best_ckpt = report, tr.checkpoint()
        history.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d: %s", tr.epoch, row)
    return FitResult(best_ckpt, tr.checkpoint(), best_report, history, absent)


def load_trainer(ckpt: "Checkpoint", manifest: DatasetManifest) -> Trainer:
    cfg = TrainConfig.from_text(ckpt.config_text)
    tr = Trainer(cfg, manifest)
    tr.restore(ckpt)
    return tr


# --------------------------------------------------------------- file format

CKPT_MAGIC = b"MMACKPT1"


class CheckpointFormatError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    epoch: int
    rng_state: np.ndarray
    config_hash: str
    config_text: str

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(f"adam_m/{k}", v) for k, v in self.adam_m.items()]
        out += [(f"adam_v/{k}", v) for k, v in self.adam_v.items()]
        out.append(("meta/adam_step", np.array([self.adam_step], dtype=np.float64)))
        out.append(("meta/epoch", np.array([self.epoch], dtype=np.float64)))
        out.append(("meta/rng_state", np.asarray(self.rng_state, dtype=np.float64)))
        return out

    def to_bytes(self) -> bytes:
        h = self.config_hash.encode("utf-8")
        c = self.config_text.encode("utf-8")
        blocks = self.blocks()
        parts = [CKPT_MAGIC, struct.pack("<I", len(h)), h, struct.pack("<I", len(c)), c, struct.pack("<I", len(blocks))]
        for name, arr in blocks:
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(CKPT_MAGIC):
            raise CheckpointFormatError("not a checkpoint (bad magic)")
        off = len(CKPT_MAGIC)

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(blob):
                raise CheckpointFormatError("checkpoint truncated")
            vals = struct.unpack_from(fmt, blob, off)
            off += size
            return vals

        def take_bytes(n):
            nonlocal off
            if off + n > len(blob):
                raise CheckpointFormatError("checkpoint truncated")
            out = blob[off : off + n]
            off += n
            return out

        (hl,) = take("<I")
        config_hash = take_bytes(hl).decode("utf-8")
        (cl,) = take("<I")
        config_text = take_bytes(cl).decode("utf-8")
        (count,) = take("<I")
        params, am, av, meta = {}, {}, {}, {}
        for _ in range(count):
            (nl,) = take("<I")
            name = take_bytes(nl).decode("utf-8")
            (rank,) = take("<I")
            dims = take(f"<{rank}I") if rank else ()
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(take_bytes(8 * n), "<f8").reshape(dims).astype(np.float64)
            group, _, key = name.partition("/")
            {"param": params, "adam_m": am, "adam_v": av, "meta": meta}.get(group, meta)[key] = arr
        if off != len(blob):
            raise CheckpointFormatError("trailing bytes after checkpoint blocks")
        try:
            return cls(
                params,
                am,
                av,
                int(meta["adam_step"][0]),
                int(meta["epoch"][0]),
                meta["rng_state"],
                config_hash,
                config_text,
            )
        except KeyError as exc:
            raise CheckpointFormatError(f"checkpoint missing block {exc}") from None

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
