"""Minimal reverse-mode differentiation over NHWC arrays."""
from .ops import (
    add, concat_channels, conv2d, crop_spatial, elementwise_add, exp, batch_norm, leaky_relu, log,
    mul, pad_spatial, reduce_mean, reduce_sum, relu, scale, sigmoid, square, sub, transpose_conv2d,
    upsample_nearest,
)
from .optim import AdamState, adam_step
from .tensor import NonFiniteError, ShapeError, Tensor, backward, topological_order, zero_grad

__all__ = [
    "Tensor", "backward", "topological_order", "zero_grad", "ShapeError", "NonFiniteError",
    "AdamState", "adam_step",
    "add", "elementwise_add", "sub", "mul", "square", "scale", "exp", "log", "sigmoid", "relu",
    "leaky_relu", "conv2d", "transpose_conv2d", "batch_norm", "reduce_mean", "reduce_sum",
    "concat_channels", "pad_spatial", "crop_spatial", "upsample_nearest",
]
