"""Reverse-mode tensor engine used by every higher module."""
from . import backend
from .core import (
    KERNELS,
    DegenerateError,
    NormalizationError,
    RankError,
    ShapeError,
    SupportError,
    Tensor,
    TensorError,
    add,
    as_tensor,
    concat,
    cosine_similarity,
    cross_entropy,
    div,
    embedding,
    gelu,
    getitem,
    is_grad_enabled,
    kl_divergence,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    softmax_with_bias,
    sub,
    sum_,
    transpose,
)
from .gradcheck import GRADCHECK_CASES, finite_difference_grad, grad_check

__all__ = [name for name in dir() if not name.startswith("_")]
