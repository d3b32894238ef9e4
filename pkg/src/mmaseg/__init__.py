"""Weakly supervised point-cloud segmentation with multi-modality point affinity."""

from .config import ABLATIONS, DeskPreset, TrainConfig, apply_ablation
from .scenes import Dataset, default_config, generate_dataset, generate_scene
from .trainer import Checkpoint, Trainer, fit

__all__ = [
    "ABLATIONS",
    "Checkpoint",
    "Dataset",
    "DeskPreset",
    "TrainConfig",
    "Trainer",
    "apply_ablation",
    "default_config",
    "fit",
    "generate_dataset",
    "generate_scene",
]
