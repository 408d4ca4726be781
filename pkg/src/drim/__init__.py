"""Disentangled shared/unique multimodal representations for survival prediction."""
from .autograd import Tensor, backward, grad_check
from .losses import IntervalGrid, shared_loss, survival_loss, unique_loss
from .metrics import c_index_antolini, evaluate
from .model import BaselineModel, DRIMModel, ModelConfig, build_model
from .synth import GeneratorConfig, PatientBatch, generate, split
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check",
    "IntervalGrid", "shared_loss", "survival_loss", "unique_loss",
    "c_index_antolini", "evaluate",
    "BaselineModel", "DRIMModel", "ModelConfig", "build_model",
    "GeneratorConfig", "PatientBatch", "generate", "split",
    "TrainConfig", "train",
]
