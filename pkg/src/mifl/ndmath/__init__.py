"""Minimal dense-tensor core: autodiff tape, ops, Adam, finite differences."""

from .adam import AdamState, adam_step, init_adam
from .check import finite_difference_grad
from .kernels import ACTIVE_PATH, HAS_NUMBA
from .tensor import (
    DEFAULT_DTYPE,
    GradientTape,
    ShapeError,
    Tensor,
    add,
    backward,
    clamp,
    concatenate,
    conv2d,
    detach,
    exp,
    index_select,
    log,
    logsumexp,
    matmul,
    maxpool2d,
    mean,
    mul,
    neg,
    relu,
    reshape,
    softmax_cross_entropy,
    softplus,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "ACTIVE_PATH",
    "AdamState",
    "DEFAULT_DTYPE",
    "GradientTape",
    "HAS_NUMBA",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "clamp",
    "concatenate",
    "conv2d",
    "detach",
    "exp",
    "finite_difference_grad",
    "index_select",
    "init_adam",
    "log",
    "logsumexp",
    "matmul",
    "maxpool2d",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "softmax_cross_entropy",
    "softplus",
    "sub",
    "sum_",
    "transpose",
]
