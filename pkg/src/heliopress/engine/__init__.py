"""Minimal float64 tensor library with reverse-mode differentiation."""

from .conv import conv2d, conv2d_transpose, pool_window, upsample_nearest
from .gradcheck import grad_check
from .tensor import (
    ContractError,
    InvalidShapeError,
    NonFiniteError,
    TapeEntry,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    checked,
    clamp,
    concat,
    div,
    exp,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    normal_cdf,
    pad2d,
    relu,
    reshape,
    sigmoid,
    softmax_axis,
    softplus,
    sqrt,
    square,
    sub,
    sum_,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
