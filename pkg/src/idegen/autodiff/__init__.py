"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import ops
from .optim import OptimizerState, adam_step
from .rng import Rng, derive_seed
from .tensor import Tensor, backward, corrupt_gradient, no_grad, precision

__all__ = ["ops", "Tensor", "backward", "no_grad", "precision", "corrupt_gradient",
           "Rng", "derive_seed", "OptimizerState", "adam_step"]
