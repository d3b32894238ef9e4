"""Two-stream shared-parameter segmentation model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .affinity import AffinityMatrix, build_multimodal_bank, compute_affinity, multiscale_features, refine_logits
from .backbone import Backbone, BackboneConfig, BackboneOutput, ParamStore, SamplingPlan, interpolate
from .heads import HeadConfig, StudentHead, TeacherHead
from .tensor import Tensor


@dataclass
class StreamOutputs:
    backbone: BackboneOutput
    f_u: Tensor  # (S, N1, d_u)
    u_seg: Tensor  # (S, N1, C) teacher logits


class MMAModel:
    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HeadConfig, n_classes: int, seed: int):
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg
        self.n_classes = n_classes
        self.store = ParamStore(seed)
        self.backbone = Backbone(self.store, backbone_cfg)
        d_base, d_skip = backbone_cfg.d_fp, backbone_cfg.widths[0]
        self.teacher = TeacherHead(self.store, d_base, d_skip, n_classes, head_cfg)
        self.student = StudentHead(self.store, d_base, d_skip, n_classes, head_cfg)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.tensors

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def teacher_streams(self, streams: np.ndarray, plan: SamplingPlan | None = None) -> StreamOutputs:
        bb = self.backbone(streams, plan)
        f_u, u_seg = self.teacher(bb)
        return StreamOutputs(bb, f_u, u_seg)

    def student_logits(self, bb: BackboneOutput) -> Tensor:
        return self.student(bb)

    def affinity_features(self, out: StreamOutputs, multiscale: bool) -> np.ndarray:
        """Detached ``(S, N1, D)`` features used for the affinity matrix."""
        if not multiscale:
            return out.f_u.data.copy()
        bb = out.backbone
        f2_up = interpolate(Tensor(bb.f2_raw.data), bb.plan.interpolation(2, 1))
        return multiscale_features(bb.f1, f2_up, out.f_u)

    def affinity(self, out: StreamOutputs, theta: float, multiscale: bool, multimodal: bool) -> AffinityMatrix:
        feats = self.affinity_features(out, multiscale)
        bank = build_multimodal_bank(feats[0], feats[1]) if multimodal else feats[0]
        return compute_affinity(bank, theta)

    def predict(self, points: np.ndarray, plan: SamplingPlan | None = None) -> tuple[np.ndarray, np.ndarray, SamplingPlan]:
        """Student arg-max labels at stage-1 points, teacher scene scores and the plan."""
        with T.no_grad():
            out = self.teacher_streams(points[None], plan)
            s_seg = self.student(out.backbone.stream(0))
            u = out.u_seg.data[0]
            sigma = 0.5 * (1.0 + np.tanh(0.5 * u.mean(axis=0)))
        return np.argmax(s_seg.data, axis=1), sigma, out.backbone.plan

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state or state[k].shape != p.shape:
                raise KeyError(f"state missing or mis-shaped parameter {k!r}")
            p.data = np.array(state[k], dtype=np.float64)


def refine_streams(aff: AffinityMatrix, u_seg: Tensor, multimodal: bool):
    if multimodal:
        return refine_logits(aff, T.select(u_seg, 0), T.select(u_seg, 1))
    return refine_logits(aff, T.select(u_seg, 0))
