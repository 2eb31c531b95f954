"""Desk-scale text-gated segmentation: a from-scratch differentiable-array
engine, a U-Net whose decoder is gated by report-token cross-attention, a
synthetic text-grounded dataset, and a training/ablation harness."""

from . import augment, data, diffcore, model, textenc, train
from .data import GeneratorConfig, Sample, SplitSpec, dice
from .model import ModelConfig
from .train import RunRecord, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "augment", "data", "diffcore", "model", "textenc", "train",
    "GeneratorConfig", "Sample", "SplitSpec", "dice",
    "ModelConfig", "RunRecord", "TrainConfig", "__version__",
]
