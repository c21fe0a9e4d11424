from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, no_grad
from .layers import backward
from .params import ParameterStore


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    n_checked: int


def _scalar(value):
    # keep the store's dtype; casting to float here would discard the extra precision
    v = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.asarray(v).reshape(-1)[0]


def default_oracle_dtype():
    """np.longdouble where it is wider than float64 (x86 extended), else float64."""
    if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps:
        return np.longdouble
    return np.float64


def finite_difference_check(
    forward: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    epsilon: float = 1e-5,
    names: list[str] | None = None,
    oracle_dtype=None,
    max_per_param: int | None = None,
    sample_seed: int = 0,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``forward(store)`` with central differences.

    The analytic gradients come from the float64 store itself. Every
    coordinate of every trainable parameter (or of ``names``) is then
    perturbed by +-epsilon on a copy held in ``oracle_dtype``; a wider type
    keeps the rounding noise of the difference quotient (about
    ulp(f) / epsilon) below the gradients being checked. ``forward`` must
    compute in the dtype of the store it is given.

    Relative error is |a - n| / max(|a|, |n|, 1e-12). With ``max_per_param``
    only that many coordinates of each tensor, drawn without replacement
    from a ``sample_seed`` stream, are perturbed.
    """
    if store.dtype != np.float64:
        raise GradCheckError("finite differences need a float64 parameter store")
    loss = forward(store)
    f0 = _scalar(loss)
    if not np.isfinite(f0):
        raise GradCheckError(f"forward value is not finite ({f0})")
    grads = backward(loss, store)
    names = list(grads) if names is None else names
    probe = store.copy(default_oracle_dtype() if oracle_dtype is None else oracle_dtype)

    rng = np.random.default_rng(sample_seed)
    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, 0)
    n = 0
    with no_grad():
        for name in names:
            data = probe[name].data
            coords = list(np.ndindex(data.shape))
            if max_per_param is not None and len(coords) > max_per_param:
                picked = np.sort(rng.choice(len(coords), size=max_per_param, replace=False))
                coords = [coords[i] for i in picked]
            for idx in coords:
                orig = data[idx]
                data[idx] = orig + epsilon
                fp = _scalar(forward(probe))
                data[idx] = orig - epsilon
                fm = _scalar(forward(probe))
                data[idx] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError(f"non-finite forward value while perturbing {name}{list(idx)}")
                num = float((fp - fm) / (2 * probe.dtype.type(epsilon)))
                ana = float(grads[name][idx])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
                n += 1
                if err > worst.max_rel_error or not worst.worst_param:
                    worst = GradCheckResult(err, name, idx, ana, num, 0)
    worst.n_checked = n
    return worst
