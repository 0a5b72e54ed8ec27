"""Minimal reverse-mode autodiff: tensors, ops, parameters, optimizers."""

from archseg.autodiff import ops
from archseg.autodiff.gradcheck import grad_check
from archseg.autodiff.optim import OptimizerConfig, lr_at, step
from archseg.autodiff.params import (
    CheckpointError,
    ParamSet,
    load_checkpoint,
    save_checkpoint,
)
from archseg.autodiff.tensor import Tensor, as_tensor

__all__ = [
    "Tensor",
    "as_tensor",
    "ops",
    "ParamSet",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "OptimizerConfig",
    "step",
    "lr_at",
    "grad_check",
]
