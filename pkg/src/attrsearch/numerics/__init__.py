"""Minimal dense-tensor math with reverse-mode gradient accumulation."""

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .gradcheck import finite_difference_check, max_relative_error
from .optimizer import SgdConfig, sgd_step
from .ops import (
    add,
    add_n,
    bias_add,
    concat,
    conv2d,
    crop_and_resize,
    dropout,
    flatten,
    gap,
    l2_distance,
    matmul,
    mean_all,
    one_minus,
    relu,
    rms_norm,
    scale,
    scalar_mul,
    sigmoid,
    square,
    softmax,
    softmax_cross_entropy,
    stack,
    sub,
    sum_all,
    take_rows,
    weighted_concat,
)
from .tape import GradientTape, TapeGradients
from .tensor import (
    DimensionError,
    NonFiniteError,
    NumericsError,
    Tensor,
    UsageError,
    as_tensor,
)

__all__ = [
    "CheckpointError", "DimensionError", "GradientTape", "NonFiniteError",
    "NumericsError", "SgdConfig", "TapeGradients", "Tensor", "UsageError",
    "add", "add_n", "as_tensor", "bias_add", "concat", "conv2d",
    "crop_and_resize", "dropout", "finite_difference_check", "flatten",
    "gap", "l2_distance", "load_tensors", "matmul", "max_relative_error",
    "mean_all", "one_minus", "relu", "rms_norm", "save_tensors", "scale", "scalar_mul",
    "sgd_step", "sigmoid", "softmax", "softmax_cross_entropy", "square", "stack",
    "sub", "sum_all", "take_rows", "weighted_concat",
]
