from . import ops
from .gradcheck import check_param_gradients, finite_difference_gradient, relative_error
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backprop,
    default_dtype,
    precision,
)

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "precision",
    "default_dtype",
    "active_tape",
    "as_tensor",
    "backprop",
    "finite_difference_gradient",
    "relative_error",
    "check_param_gradients",
]
