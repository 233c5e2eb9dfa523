"""Linear noise schedule, closed-form forward process, DDIM sub-steps.

Timesteps are 1-based, ``t = 1..T``.  ``alpha_bar(0)`` is exactly 1, which
lets the final DDIM step land on the clean estimate with the same formula.
The only conversion between a timestep and an array slot is
:meth:`NoiseSchedule.alpha_bar`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_T = 1024
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_SAMPLING_STEPS = 256


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False, compare=False)
    alpha_bars: np.ndarray = field(repr=False, compare=False)

    def alpha_bar(self, t):
        """``prod_{i<=t} (1 - beta_i)`` for ``t`` in ``0..T`` (scalar or int array)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ContractError(f"timestep out of range [0, {self.T}]: {t}")
        out = np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])
        return float(out) if out.ndim == 0 else out

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep out of range [1, {self.T}]: {t}")
        return float(self.betas[t - 1])

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alpha_bars)


def _check_t(t, sched: NoiseSchedule, low: int = 1):
    t = np.asarray(t)
    if t.dtype.kind not in "iu":
        raise ContractError(f"timesteps must be integers, got {t.dtype}")
    if np.any(t < low) or np.any(t > sched.T):
        raise ContractError(f"timestep out of range [{low}, {sched.T}]: {t}")
    return t


def _per_sample(coef, x: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-batch coefficient against an NCHW-like array."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape((-1,) + (1,) * (x.ndim - 1))


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` may be one index per batch row."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t = _check_t(t, sched)
    ab = _per_sample(sched.alpha_bar(t), x0)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0.dtype, eps.dtype), copy=False)


def q_step(x_prev, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Single Markov noising step ``sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps``."""
    b = sched.beta(t)
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(eps)


@dataclass(frozen=True)
class StepSequence:
    timesteps: tuple[int, ...]
    previous: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.timesteps)

    def __iter__(self):
        return iter(zip(self.timesteps, self.previous))


def uniform_substeps(T: int, n_steps: int) -> StepSequence:
    """``n_steps`` timesteps evenly strided over ``[1, T]``, descending from ``T``.

    Each entry's previous index is the next entry; the last one points at 0.
    """
    if not 1 <= n_steps <= T:
        raise ConfigError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    ts = tuple(T - (i * T) // n_steps for i in range(n_steps))
    return StepSequence(ts, ts[1:] + (0,))
