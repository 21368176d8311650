"""Float64 tensors with nested reverse-mode differentiation."""

from metashot.diffcore import tensor as ops
from metashot.diffcore.autodiff import (
    evaluate,
    finite_difference_gradient,
    gradient,
    relative_error,
    value_and_gradient,
)
from metashot.diffcore.params import ParamSet
from metashot.diffcore.tensor import Tensor, as_tensor, grad, no_grad, scope, set_grad_enabled

__all__ = [
    "ParamSet",
    "Tensor",
    "as_tensor",
    "evaluate",
    "finite_difference_gradient",
    "grad",
    "gradient",
    "no_grad",
    "ops",
    "relative_error",
    "scope",
    "set_grad_enabled",
    "value_and_gradient",
]
