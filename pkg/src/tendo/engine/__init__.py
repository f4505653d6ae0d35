"""Minimal reverse-mode tensor engine."""
from .tensor import Function, Tensor, backward, grad_enabled, no_grad
from .ops import (ShapeError, add, batch_norm, concat_channels, conv2d, cross_entropy, dense,
                  depthwise_conv2d, dropout, flatten, global_avg_pool, nearest_upsample, pool2d,
                  relu, separable_conv2d, sigmoid, softmax, transposed_conv2d)

__all__ = [
    "Function", "Tensor", "backward", "grad_enabled", "no_grad", "ShapeError", "add",
    "batch_norm", "concat_channels", "conv2d", "cross_entropy", "dense", "depthwise_conv2d",
    "dropout", "flatten", "global_avg_pool", "nearest_upsample", "pool2d", "relu",
    "separable_conv2d", "sigmoid", "softmax", "transposed_conv2d",
]
