"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """``(f(t + h e_i) - f(t - h e_i)) / 2h`` for every entry (or the given ones).

    Entries not in ``indices`` are left at zero.
    """
    grad = np.zeros_like(t.data)
    flat_idx = [np.ravel_multi_index(i, t.shape) for i in indices] if indices is not None else range(t.size)
    view = t.data.reshape(-1)
    for k in flat_idx:
        orig = view[k]
        view[k] = orig + h
        plus = fn().item()
        view[k] = orig - h
        minus = fn().item()
        view[k] = orig
        grad.reshape(-1)[k] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; zero when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> list[float]:
    """Relative error between taped and finite-difference gradients, per parameter.

    With ``max_entries`` only that many randomly chosen entries of each
    parameter are compared.
    """
    for p in params:
        p.grad = None
    backward(fn())
    rng = rng or np.random.default_rng(0)
    errors = []
    for p in params:
        analytic = p.grad
        if max_entries is None or p.size <= max_entries:
            errors.append(relative_error(analytic, numerical_grad(fn, p, h)))
            continue
        flat = rng.choice(p.size, size=max_entries, replace=False)
        idx = [np.unravel_index(k, p.shape) for k in flat]
        numeric = numerical_grad(fn, p, h, idx)
        errors.append(relative_error(analytic.reshape(-1)[flat], numeric.reshape(-1)[flat]))
    return errors


def directional_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                      seed: int = 0) -> float:
    """Compare ``grad . v`` with a central difference along a random unit direction ``v``.

    Perturbs all parameters at once, so every gradient entry contributes.
    """
    for p in params:
        p.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [(d / norm).astype(p.dtype) for p, d in zip(params, dirs)]
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
    base = [p.data.copy() for p in params]
    for p, b, d in zip(params, base, dirs):
        p.data[...] = b + h * d
    plus = fn().item()
    for p, b, d in zip(params, base, dirs):
        p.data[...] = b - h * d
    minus = fn().item()
    for p, b in zip(params, base):
        p.data[...] = b
    numeric = (plus - minus) / (2.0 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300)
