from . import ops
from .core import NonFiniteError, ShapeError, Tensor, as_tensor, backward, is_grad_enabled, no_grad, zero_grad
from .gradcheck import grad_check
from .optim import AdamW, OptimizerState, adamw_step

__all__ = [
    "AdamW",
    "NonFiniteError",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "backward",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "zero_grad",
]
