"""Central finite-difference checks of analytic gradients (run in float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                   entries: np.ndarray | None = None) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place.

    With ``entries`` (flat indices) only those positions are computed; the rest stay 0.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                    params: Sequence[Tensor] = (), max_entries: int | None = None,
                    rng: np.random.Generator | None = None, floor: float = 1e-6) -> float:
    """Max elementwise relative error between backward() and finite differences.

    ``fn`` maps float64 tensors built from ``inputs`` to a scalar tensor; extra
    leaf ``params`` already used inside ``fn`` are checked as well. With
    ``max_entries`` each tensor is checked at that many positions drawn from
    ``rng`` instead of everywhere (for models too large to sweep). ``floor`` is
    the smallest denominator of the relative error, so structurally zero
    gradients are judged against finite-difference roundoff rather than 0.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    for p in params:
        p.grad = None
    out = fn(*leaves)
    out.backward()
    worst = 0.0
    targets = list(zip(leaves, arrays)) + [(p, p.data) for p in params]
    for leaf, array in targets:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(array)
        entries = None
        if max_entries is not None and array.size > max_entries:
            entries = np.sort((rng or np.random.default_rng(0)).choice(array.size, max_entries, replace=False))
        numeric = numerical_grad(lambda: _evaluate(fn, arrays), array, h, entries)
        err = relative_error(analytic, numeric, floor)
        if entries is not None:
            err = err.reshape(-1)[entries]
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def _evaluate(fn, arrays) -> float:
    with no_grad():
        return fn(*[Tensor(a) for a in arrays]).item()


def to_float64(module) -> None:
    """Cast every parameter (and fixed table) of a module tree to float64 in place."""
    for m in module.modules():
        for key, value in vars(m).items():
            if isinstance(value, Tensor):
                value.data = value.data.astype(np.float64)
            elif isinstance(value, np.ndarray) and value.dtype == np.float32:
                setattr(m, key, value.astype(np.float64))
