"""Rotation-aware, attention-augmented anchor-free ship detector on a numpy autodiff core."""
from .model import Detector, ModelConfig, PRESETS, build_model
from .tensor import Tensor, no_grad

__all__ = ["Detector", "ModelConfig", "PRESETS", "Tensor", "build_model", "no_grad"]
__version__ = "0.1.0"
