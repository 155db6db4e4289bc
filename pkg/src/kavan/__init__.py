"""Keypoint-attended emotion intensity learning on short video clips.

A numpy reverse-mode autodiff core drives soft spatial attention supervised
by keypoint heatmaps, a hierarchical segment LSTM, and a multi-task loss
over emotion intensities, coarse categories and pairwise ranking.
"""

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateTargetError,
    DimensionError,
    KavanError,
    NumericAbort,
    NumericInputError,
)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DegenerateTargetError",
    "DimensionError",
    "KavanError",
    "NumericAbort",
    "NumericInputError",
    "Tensor",
]
