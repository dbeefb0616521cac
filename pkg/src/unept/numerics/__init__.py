"""Minimal float64 tensor substrate with reverse-mode differentiation.

``d_model`` and ``d_m`` name the same width throughout the package.
"""
from .tensor import (
    DTYPE,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    getitem,
    is_grad_enabled,
    log,
    mean,
    mul,
    no_grad,
    record,
    relu,
    reshape,
    sigmoid,
    square,
    stack,
    sub,
    transpose,
    tsum,
)
from .ops import (
    avg_pool2d,
    bce_with_logits,
    bilinear_sample,
    channel_layer_norm,
    conv2d,
    dropout,
    interpolation_matrix,
    layer_norm,
    log_softmax,
    matmul,
    nearest_sample,
    sample_table,
    softmax,
    upsample_bilinear,
)
from .module import Module, parameter
from .gradcheck import GradReport, check_parameters, numerical_grad, relative_error

__all__ = [
    "DTYPE", "NonFiniteError", "Tensor", "add", "as_tensor", "concat", "exp", "getitem",
    "is_grad_enabled", "log", "mean", "mul", "no_grad", "record", "relu", "reshape", "sigmoid",
    "square", "stack", "sub", "transpose", "tsum", "avg_pool2d", "bce_with_logits", "bilinear_sample",
    "channel_layer_norm", "conv2d", "dropout", "interpolation_matrix", "layer_norm",
    "log_softmax", "matmul", "nearest_sample", "sample_table", "softmax", "upsample_bilinear",
    "Module", "parameter", "GradReport", "check_parameters", "numerical_grad", "relative_error",
]
