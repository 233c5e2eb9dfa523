"""Reverse-process primitives: clean-estimate recovery and the DDIM/DDPM step.

Trajectory arithmetic is carried out in float64 regardless of the network
dtype, so algebraic identities between consecutive steps hold to ~1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .rng import Rng
from .schedule import (NoiseSchedule, StepSequence, _check_t, _per_sample, linear_schedule,
                       uniform_substeps)


@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule = field(default_factory=linear_schedule)
    steps: StepSequence | None = None
    stochastic: bool = False
    eta: float = 1.0
    clamp: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps is None:
            object.__setattr__(self, "steps", uniform_substeps(self.schedule.T, min(256, self.schedule.T)))
        if self.steps.timesteps[0] > self.schedule.T:
            raise ConfigError("step sequence exceeds schedule length")
        if self.eta < 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}")

    @classmethod
    def make(cls, T: int = 1024, beta_start: float = 1e-4, beta_end: float = 0.02,
             n_steps: int = 256, **kw) -> "SamplerConfig":
        sched = linear_schedule(T, beta_start, beta_end)
        return cls(schedule=sched, steps=uniform_substeps(T, n_steps), **kw)


def predict_x0(x_t, eps_hat, t, sched: NoiseSchedule) -> np.ndarray:
    """Invert the forward marginal: ``(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ContractError(f"x_t {x_t.shape} and eps {eps_hat.shape} differ")
    t = _check_t(t, sched)
    ab = _per_sample(sched.alpha_bar(t), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_sigma(t: int, t_prev: int, sched: NoiseSchedule, eta: float = 1.0) -> float:
    """``eta`` times the DDPM posterior standard deviation between ``t`` and ``t_prev``."""
    ab_t, ab_p = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
    return eta * float(np.sqrt(max(var, 0.0)))


def reverse_step(x_t, eps_hat, t: int, t_prev: int, cfg: SamplerConfig,
                 rng: Rng | None = None, x0_hat=None) -> np.ndarray:
    """One reverse update from ``t`` to ``t_prev``.

    Deterministic mode: ``sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps``.
    Stochastic mode adds ``sigma_t`` times fresh noise from ``rng`` and
    shrinks the eps coefficient to ``sqrt(1 - abar_prev - sigma_t**2)``.
    """
    sched = cfg.schedule
    if not 0 <= t_prev < t:
        raise ContractError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if x0_hat is None:
        x0_hat = predict_x0(x_t, eps_hat, t, sched)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab_p = sched.alpha_bar(t_prev)
    if not cfg.stochastic:
        return np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * eps_hat

    sigma = posterior_sigma(t, t_prev, sched, cfg.eta)
    radicand = 1.0 - ab_p - sigma * sigma
    if radicand < -1e-12:
        raise ConfigError(f"sigma_t^2={sigma * sigma:.3g} exceeds 1 - abar_prev={1 - ab_p:.3g}")
    if rng is None:
        raise ContractError("stochastic sampling needs an rng")
    noise = rng.normal(np.shape(x_t), dtype=np.float64)
    return np.sqrt(ab_p) * x0_hat + np.sqrt(max(radicand, 0.0)) * eps_hat + sigma * noise


def analytic_gaussian_eps(x_t, t, mean: float, std: float, sched: NoiseSchedule) -> np.ndarray:
    """Exact ``E[eps | x_t]`` when ``x0 ~ N(mean, std**2 I)``.

    With ``a = abar_t`` and ``k = a std**2 / (a std**2 + 1 - a)``, the
    posterior mean of ``sqrt(a) x0`` is ``sqrt(a) mean + k (x_t - sqrt(a) mean)``.
    """
    if std <= 0:
        raise ContractError(f"std must be positive, got {std}")
    x_t = np.asarray(x_t, dtype=np.float64)
    t = _check_t(t, sched)
    a = _per_sample(sched.alpha_bar(t), x_t)
    k = a * std * std / (a * std * std + 1.0 - a)
    signal = np.sqrt(a) * mean + k * (x_t - np.sqrt(a) * mean)
    return (x_t - signal) / np.sqrt(1.0 - a)


def ddim_sample(eps_fn, x_T, cfg: SamplerConfig, rng: Rng | None = None) -> np.ndarray:
    """Run the single-model reverse chain from ``x_T`` with ``eps_fn(x_t, t)``."""
    x = np.asarray(x_T, dtype=np.float64)
    for t, t_prev in cfg.steps:
        eps = np.asarray(eps_fn(x, t), dtype=np.float64)
        x0 = predict_x0(x, eps, t, cfg.schedule)
        x = reverse_step(x, eps, t, t_prev, cfg, rng=rng, x0_hat=x0)
    return x
