"""Minimal reverse-mode autodiff engine, Adam, and NPIW checkpoints."""

from npi.autodiff.checkpoint import CheckpointFormatError, load_weights, save_weights
from npi.autodiff.nn import LayerNorm, Linear, Module, frozen
from npi.autodiff.optim import AdamState, adam_step, clip_grad_norm, grad_norm
from npi.autodiff.tensor import (
    ContractError,
    DimensionError,
    DomainError,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    no_grad,
)

__all__ = [
    "AdamState",
    "CheckpointFormatError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "clip_grad_norm",
    "frozen",
    "grad_norm",
    "load_weights",
    "no_grad",
    "save_weights",
]
