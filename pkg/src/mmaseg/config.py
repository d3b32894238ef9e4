"""Run configuration, key=value (de)serialization and ablation presets."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace

from .backbone import BackboneConfig, SAStage
from .heads import HeadConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr0: float = 0.0014
    lr_decay_epochs: tuple[int, ...] = (32, 36)
    lr_decay_factor: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    theta: float = 0.3
    tau: float = 0.7
    ncw_enabled: bool = True
    multiscale_enabled: bool = True
    multimodal_enabled: bool = True
    transformer_enabled: bool = True
    self_training_start: int = 0
    eval_every: int = 5
    sa_npoints: tuple[int, ...] = (256, 128, 64, 32)
    sa_radii: tuple[float, ...] = (0.3, 0.6, 1.2, 2.4)
    sa_nsample: tuple[int, ...] = (16, 16, 16, 16)
    sa_widths: tuple[int, ...] = (32, 64, 128, 256)
    fp_width: int = 128
    d_u: int = 128
    d_student: int = 128
    n_heads: int = 4
    mlp_norm: str = "points"

    def __post_init__(self):
        decay = self.lr_decay_epochs
        if any(a >= b for a, b in zip(decay, decay[1:])):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing, got {decay}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if not 0.0 <= self.theta < 1.0 or not 0.0 <= self.tau < 1.0:
            raise ConfigError("theta and tau must lie in [0, 1)")
        if self.mlp_norm not in ("points", "channels"):
            raise ConfigError(f"mlp_norm must be 'points' or 'channels', got {self.mlp_norm!r}")

    def backbone(self, n_points: int) -> BackboneConfig:
        sa = tuple(
            SAStage(n, r, k, (w,))
            for n, r, k, w in zip(self.sa_npoints, self.sa_radii, self.sa_nsample, self.sa_widths)
        )
        return BackboneConfig(
            n_points=n_points, sa=sa, fp=((self.fp_width,), (self.fp_width,)), mlp_norm=self.mlp_norm
        )

    def heads(self) -> HeadConfig:
        return HeadConfig(
            d_u=self.d_u,
            d_student=self.d_student,
            n_heads=self.n_heads,
            ncw=self.ncw_enabled,
            transformer=self.transformer_enabled,
            mlp_norm=self.mlp_norm,
        )

    # ------------------------------------------------------ key=value text

    def to_lines(self) -> list[str]:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            out.append(f"{k}={v}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def hash(self, data_signature: str = "") -> str:
        return hashlib.sha256((self.to_text() + data_signature).encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, kv: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = cls() if base is None else base
        known = {f.name: f for f in fields(cls)}
        updates = {}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _parse(raw, getattr(base, key), key)
        try:
            return replace(base, **updates)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_mapping(parse_kv(text), base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [s for s in raw.split(",") if s.strip()]
            elem = type(like[0]) if like else int
            return tuple(elem(s) for s in items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    kv = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        kv[key.strip()] = value.strip()
    return kv


# paper ablation rows: flags (multimodal, multiscale, ncw, transformer)
ABLATIONS: dict[str, tuple[str, dict[str, bool]]] = {
    "baseline": ("A.1", dict(multimodal_enabled=False, multiscale_enabled=False, ncw_enabled=False, transformer_enabled=False)),
    "+ncw": ("A.2", dict(multimodal_enabled=False, multiscale_enabled=False, ncw_enabled=True, transformer_enabled=False)),
    "+mma": ("A.3", dict(multimodal_enabled=True, multiscale_enabled=False, ncw_enabled=False, transformer_enabled=False)),
    "+mma+ncw": ("A.4", dict(multimodal_enabled=True, multiscale_enabled=False, ncw_enabled=True, transformer_enabled=False)),
    "+ms": ("A.5", dict(multimodal_enabled=False, multiscale_enabled=True, ncw_enabled=False, transformer_enabled=False)),
    "+mma+ms": ("A.6", dict(multimodal_enabled=True, multiscale_enabled=True, ncw_enabled=False, transformer_enabled=False)),
    "full-no-transformer": ("A.7", dict(multimodal_enabled=True, multiscale_enabled=True, ncw_enabled=True, transformer_enabled=False)),
    "full": ("A.8", dict(multimodal_enabled=True, multiscale_enabled=True, ncw_enabled=True, transformer_enabled=True)),
}


def apply_ablation(cfg: TrainConfig, ablation: str) -> TrainConfig:
    try:
        _, flags = ABLATIONS[ablation]
    except KeyError:
        raise ConfigError(f"unknown ablation {ablation!r}; valid ids: {', '.join(ABLATIONS)}") from None
    return replace(cfg, **flags)


@dataclass(frozen=True)
class DeskPreset:
    """Dataset defaults used by ``gen`` and the acceptance experiments."""

    n_train: int = 200
    n_eval: int = 50
    n_points: int = 1024
    n_classes: int = 6
    seed: int = 0
