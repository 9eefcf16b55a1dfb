"""Frequency-merged transformer encoder/decoder for salient object segmentation."""

from .config import ConfigError, ModelConfig, TrainConfig, default_paper_config, desk_config, load_config
from .model import SegmentationModel, count_parameters

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "default_paper_config",
    "desk_config",
    "load_config",
    "SegmentationModel",
    "count_parameters",
]
