"""Weakly-supervised semantic matching on dense descriptor correlations."""

from .correlation import CorrelationMap, FeatureMap, correlate, foreground_mask
from .geometry import AffineParams, Cascade, TpsParams
from .losses import LossWeights, total_loss
from .regressor import RegressorWeights, init_weights, predict
from .tensorcore import NumericError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "AffineParams", "Cascade", "CorrelationMap", "FeatureMap", "LossWeights", "NumericError",
    "RegressorWeights", "ShapeError", "Tensor", "TpsParams", "correlate", "foreground_mask",
    "init_weights", "predict", "total_loss",
]
