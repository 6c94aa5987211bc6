"""Minimal reverse-mode autodiff over numpy arrays."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import Adam, OptimizerState, adam_step
from .tensor import ContractError, ShapeError, Tape, Tensor, active_tape, backward

__all__ = [
    "Adam",
    "CheckpointError",
    "ContractError",
    "OptimizerState",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "backward",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
]
