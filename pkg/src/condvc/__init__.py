"""Conditional, conditional-residual and masked conditional-residual inter-frame coding at desk scale."""

from .config import CodingMode, ConfigError, ModelConfig, TrainConfig, toy_model_config
from .codec import InterFrameCodec, build_model

__version__ = "0.1.0"

__all__ = ["CodingMode", "ConfigError", "ModelConfig", "TrainConfig", "toy_model_config",
           "InterFrameCodec", "build_model", "__version__"]
