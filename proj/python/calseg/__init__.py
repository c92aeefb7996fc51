"""Calcium-imaging neuron segmentation: simulation, features, ground truth,
Bayesian U-Net inference and metrics."""

from ._core import (
    ConfigError,
    DataError,
    DegenerateInputError,
    Error,
    FormatError,
    IoError,
    Model,
    NumericError,
    PlacementError,
    ShapeError,
    correlation_stack,
    dice_uncertainty_correlation,
    evaluate,
    feature_stack,
    make_groundtruth,
    otsu_threshold,
    parameter_count,
    simulate,
    variance_map,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "Error",
    "FormatError",
    "IoError",
    "Model",
    "NumericError",
    "PlacementError",
    "ShapeError",
    "correlation_stack",
    "dice_uncertainty_correlation",
    "evaluate",
    "feature_stack",
    "make_groundtruth",
    "otsu_threshold",
    "parameter_count",
    "simulate",
    "variance_map",
]
