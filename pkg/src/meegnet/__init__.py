"""mEEGNet: per-electrode detection of abnormal one-second EEG windows."""

__version__ = "0.1.0"

from .errors import (ConfigError, EmptySummaryError, FormatError, MEEGNetError, NumericError,
                     ShapeError, StateError)
from .losses import LossConfig
from .model import MEEGNet, ModelConfig, build, load_checkpoint, save_checkpoint

__all__ = ["MEEGNet", "ModelConfig", "LossConfig", "build", "load_checkpoint", "save_checkpoint",
           "ConfigError", "EmptySummaryError", "FormatError", "MEEGNetError", "NumericError",
           "ShapeError", "StateError", "__version__"]
