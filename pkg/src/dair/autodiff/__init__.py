"""Minimal reverse-mode differentiation and optimisation."""

from .optim import Adam, AdamState, adam_step
from .tensor import (
    DomainError,
    ShapeError,
    Tensor,
    concat,
    forward_op,
    is_grad_enabled,
    layer_norm,
    minimum,
    no_grad,
    softmax,
    stack,
    tensor,
)
from .gradcheck import numerical_grad, check_grads

__all__ = [
    "Adam",
    "AdamState",
    "adam_step",
    "DomainError",
    "ShapeError",
    "Tensor",
    "concat",
    "forward_op",
    "is_grad_enabled",
    "layer_norm",
    "minimum",
    "no_grad",
    "softmax",
    "stack",
    "tensor",
    "numerical_grad",
    "check_grads",
]
