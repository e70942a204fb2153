"""Numeric building blocks for the contour encoder."""

from .layers import (
    ACTIVATIONS,
    BatchNorm1d,
    ContextAttention,
    Conv1d,
    Identity,
    Layer,
    Linear,
    MaxPool1d,
    ReLU,
    ShapeError,
    Tanh,
)
from .optim import Adam, AdamState, adam_step
from .gradcheck import GradientCheckError, check_layer, gradient_check, numeric_gradient, relative_error

__all__ = [
    "ACTIVATIONS", "BatchNorm1d", "ContextAttention", "Conv1d", "Identity", "Layer", "Linear",
    "MaxPool1d", "ReLU", "ShapeError", "Tanh", "Adam", "AdamState", "adam_step",
    "GradientCheckError", "check_layer", "gradient_check", "numeric_gradient", "relative_error",
]
