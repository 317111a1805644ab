"""Shared-weight audio-visual transformer with multi-ratio masked pretraining."""

from .config import RunConfig, paper_profile, profile, tiny_profile
from .model import ModelConfig, SiameseAV, count_parameters
from .tensor import ConfigError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ModelConfig",
    "RunConfig",
    "ShapeError",
    "SiameseAV",
    "Tensor",
    "count_parameters",
    "no_grad",
    "paper_profile",
    "profile",
    "tiny_profile",
]
