"""Quadrangle attention on a small numpy autodiff engine."""

from .attention import init_attention, quadrangle_attention, window_attention
from .errors import CheckpointError, ConfigError, NumericError
from .estimator import QFormerClassifier
from .model import PRESETS, ModelConfig, QFormer, build, get_preset
from .quad import RegConfig, build_transform, project_coords, reg_loss
from .sampling import bilinear_sample
from .windowing import merge, partition

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ModelConfig", "NumericError", "PRESETS", "QFormer",
    "QFormerClassifier", "RegConfig", "bilinear_sample", "build", "build_transform",
    "get_preset", "init_attention", "merge", "partition", "project_coords",
    "quadrangle_attention", "reg_loss", "window_attention",
]
