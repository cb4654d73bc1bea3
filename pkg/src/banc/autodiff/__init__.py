"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad, set_check_finite
from .gradcheck import grad_check, numerical_grad
from . import ops

__all__ = [
    "Tensor",
    "as_tensor",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "numerical_grad",
    "ops",
    "set_check_finite",
]
