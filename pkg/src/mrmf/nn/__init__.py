"""Minimal float64 neural-network engine with per-layer analytic gradients."""

from .gradcheck import GradCheckReport, gradient_check, layer_gradient_check, numeric_gradient, relative_error
from .layers import (
    AvgPoolND,
    BatchNorm,
    ConvND,
    Flatten,
    FullyConnected,
    Layer,
    ReLU,
    Tanh,
    make_layer,
    window_mean,
)
from .loss import mse_loss
from .model import ForwardCache, Model, backward, build_model, forward
from .optim import OptimizerState, adam, optimizer_step, sgd

__all__ = [
    "AvgPoolND", "BatchNorm", "ConvND", "Flatten", "FullyConnected", "Layer", "ReLU", "Tanh",
    "make_layer", "window_mean", "mse_loss", "ForwardCache", "Model", "backward", "build_model",
    "forward", "OptimizerState", "adam", "sgd", "optimizer_step", "GradCheckReport",
    "gradient_check", "layer_gradient_check", "numeric_gradient", "relative_error",
]
