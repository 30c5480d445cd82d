"""Adversarial perturbation of batch feature statistics for batch-effect
robust classification, with ERM / AdaBN / AdvStyle baselines and a
plate-structured synthetic benchmark."""
from ._kernels import backend
from .data import PlateDataset, PlateSpec, generate
from .losses import LossConfig
from .train import TrainConfig, TrainedModel, train

__all__ = [
    "LossConfig",
    "PlateDataset",
    "PlateSpec",
    "TrainConfig",
    "TrainedModel",
    "backend",
    "generate",
    "train",
]
__version__ = "0.1.0"
