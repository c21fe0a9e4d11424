"""Small differentiable numerical core used by the referring-expression models."""

import hashlib

import numpy as np

from .autodiff import Tensor, grad, no_grad
from .gradcheck import GradCheckError, GradCheckResult, finite_difference_check
from .layers import (
    AffineStack,
    ConfigError,
    DegenerateBatchError,
    LstmStack,
    LstmState,
    ShapeError,
    affine_stack_forward,
    backward,
    cross_entropy,
    dropout,
    lstm_forward,
    nll,
    softmax,
)
from .optim import AdamState, adam_step
from .params import CheckpointError, ParameterStore


def derive_seed(seed: int, component: str) -> int:
    """Stable 64-bit seed for a named component, independent of PYTHONHASHSEED."""
    digest = hashlib.sha256(f"{int(seed)}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, component))


__all__ = [
    "AdamState",
    "AffineStack",
    "CheckpointError",
    "ConfigError",
    "DegenerateBatchError",
    "GradCheckError",
    "GradCheckResult",
    "LstmStack",
    "LstmState",
    "ParameterStore",
    "ShapeError",
    "Tensor",
    "adam_step",
    "affine_stack_forward",
    "backward",
    "component_rng",
    "cross_entropy",
    "derive_seed",
    "dropout",
    "finite_difference_check",
    "grad",
    "lstm_forward",
    "nll",
    "no_grad",
    "softmax",
]
