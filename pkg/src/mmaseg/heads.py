"""Teacher / student segmentation heads with normalized classifier weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneOutput, Linear, LayerNorm, ParamStore, SharedMLP, feature_propagation
from .tensor import Tensor

NCW_FLOOR = 1e-12


@dataclass(frozen=True)
class HeadConfig:
    d_u: int = 128
    d_student: int = 128
    n_heads: int = 4
    ncw: bool = True
    transformer: bool = True
    mlp_norm: str = "points"


def ncw_normalize(w: Tensor) -> Tensor:
    """Divide each class column of a ``(d, C)`` weight table by its L2 norm."""
    return T.div(w, T.l2_norm(w, axis=0, keepdims=True, floor=NCW_FLOOR))


class Classifier:
    """Bias-free ``d -> C`` projection, optionally NCW-reparameterized."""

    def __init__(self, store: ParamStore, name: str, d: int, n_classes: int, ncw: bool):
        self.weight = store.uniform(f"{name}.weight", (d, n_classes), d)
        self.ncw = ncw

    def effective_weight(self) -> Tensor:
        return ncw_normalize(self.weight) if self.ncw else self.weight

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.effective_weight())


class TransformerEncoderLayer:
    """Pre-norm multi-head self-attention + feed-forward, both residual."""

    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError(f"model width {d} not divisible by {n_heads} heads")
        self.d, self.h = d, n_heads
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ff1 = Linear(store, f"{name}.ff1", d, 2 * d)
        self.ff2 = Linear(store, f"{name}.ff2", 2 * d, d)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        x = T.reshape(x, (*lead, n, self.h, self.d // self.h))
        r = len(lead)
        return T.transpose(x, (*range(r), r + 1, r, r + 2))

    def attention_weights(self, x: Tensor) -> Tensor:
        y = self.ln1(x)
        q, k = self._split(self.q(y)), self._split(self.k(y))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(self.d // self.h))
        return T.softmax(scores, axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        r = len(lead)
        y = self.ln1(x)
        q, k, v = self._split(self.q(y)), self._split(self.k(y)), self._split(self.v(y))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(self.d // self.h))
        att = T.matmul(T.softmax(scores, axis=-1), v)
        att = T.reshape(T.transpose(att, (*range(r), r + 1, r, r + 2)), (*lead, n, d))
        x = T.add(x, self.o(att))
        z = self.ff2(T.relu(self.ff1(self.ln2(x))))
        return T.add(x, z)


class TeacherHead:
    def __init__(self, store: ParamStore, d_base: int, d_skip: int, n_classes: int, cfg: HeadConfig):
        self.fp = SharedMLP(store, "teacher.fp", d_base + d_skip, (cfg.d_u,), cfg.mlp_norm)
        self.classifier = Classifier(store, "teacher.cls", cfg.d_u, n_classes, cfg.ncw)

    def __call__(self, bb: BackboneOutput) -> tuple[Tensor, Tensor]:
        f_u = feature_propagation(bb.base, bb.plan.interpolation(2, 1), bb.f1, self.fp)
        return f_u, self.classifier(f_u)


class StudentHead:
    def __init__(self, store: ParamStore, d_base: int, d_skip: int, n_classes: int, cfg: HeadConfig):
        self.fp = SharedMLP(store, "student.fp", d_base + d_skip, (cfg.d_student,), cfg.mlp_norm)
        self.encoder = (
            TransformerEncoderLayer(store, "student.encoder", cfg.d_student, cfg.n_heads) if cfg.transformer else None
        )
        self.classifier = Classifier(store, "student.cls", cfg.d_student, n_classes, cfg.ncw)

    def __call__(self, bb: BackboneOutput) -> Tensor:
        x = feature_propagation(bb.base, bb.plan.interpolation(2, 1), bb.f1, self.fp)
        if self.encoder is not None:
            x = self.encoder(x)
        return self.classifier(x)
