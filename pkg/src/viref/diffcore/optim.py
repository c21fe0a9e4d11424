from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ShapeError
from .params import ParameterStore


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParameterStore, AdamState]:
    """Bias-corrected Adam update, applied in place to the trainable entries of ``store``."""
    trainable = store.trainable()
    if set(grads) != set(trainable):
        missing = sorted(set(trainable) - set(grads))
        extra = sorted(set(grads) - set(trainable))
        raise KeyError(f"gradient keys do not match trainable parameters (missing={missing}, extra={extra})")
    # validate everything before touching any parameter
    for name, t in trainable.items():
        if np.shape(grads[name]) != t.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(grads[name])}, parameter has {t.shape}")

    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, t in trainable.items():
        g = np.asarray(grads[name], dtype=t.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(t.dtype)
    return store, state
