"""Minimal reverse-mode differentiation engine, layers and optimizer."""

from . import engine, nn
from .engine import Tensor, constant
from .gradcheck import finite_diff_gradcheck, primitive_checks, run_primitive_suite
from .optim import Parameter, adam_step, zero_grads

__all__ = [
    "Tensor",
    "constant",
    "engine",
    "nn",
    "Parameter",
    "adam_step",
    "zero_grads",
    "finite_diff_gradcheck",
    "primitive_checks",
    "run_primitive_suite",
]
