"""Reverse-mode automatic differentiation over float64 numpy arrays."""

from . import ops
from .gradcheck import finite_difference_check
from .ops import OPS, forward_op
from .tensor import ComputationTape, Tensor, as_tensor, backpropagate, grad_enabled, no_grad

__all__ = [
    "OPS",
    "ComputationTape",
    "Tensor",
    "as_tensor",
    "backpropagate",
    "finite_difference_check",
    "forward_op",
    "grad_enabled",
    "no_grad",
    "ops",
]
