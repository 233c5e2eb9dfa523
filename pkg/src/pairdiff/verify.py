"""Learning-free oracle suites, run by ``pairdiff verify``.

Each suite returns a :class:`SuiteResult`; none of them trains anything.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tg
from .denoiser import Denoiser, DenoiserConfig
from .gradcheck import check_gradients, directional_check
from .pig import paired_trajectory, sample_paired
from .rng import Rng
from .sampler import SamplerConfig, analytic_gaussian_eps, ddim_sample, reverse_step
from .schedule import linear_schedule, q_sample, uniform_substeps


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}\t{self.name}\t{self.detail}\t{self.seconds:.2f}s"


def forward_marginals(n_draws: int = 10_000, timesteps=(1, 512, 1024), seed: int = 0) -> SuiteResult:
    """Monte-Carlo moments of the noising marginal.

    Per-pixel means must sit within 4 standard errors of ``sqrt(abar) x0``.
    The variance does not depend on ``x0``, so it is pooled over pixels and
    must be within 3% of ``1 - abar``.
    """
    sched = linear_schedule()
    x0 = np.linspace(-1.0, 1.0, 16)
    rng = Rng(seed).split("marginals")
    worst_z, worst_var = 0.0, 0.0
    for t in timesteps:
        eps = rng.normal((n_draws, x0.size), np.float64)
        xt = q_sample(np.broadcast_to(x0, eps.shape), t, eps, sched)
        ab = sched.alpha_bar(t)
        se = np.sqrt((1.0 - ab) / n_draws)
        worst_z = max(worst_z, float(np.max(np.abs(xt.mean(0) - np.sqrt(ab) * x0)) / se))
        worst_var = max(worst_var, abs(float(xt.var(0, ddof=1).mean()) / (1.0 - ab) - 1.0))
    ok = worst_z < 4.0 and worst_var < 0.03
    return SuiteResult("forward-marginals", ok, f"max|z|={worst_z:.2f} max_var_rel={worst_var:.4f}")


def trajectory_identity(seed: int = 0) -> SuiteResult:
    """With the true noise every deterministic step lands on the forward marginal."""
    sched = linear_schedule()
    rng = Rng(seed).split("trajectory")
    x0 = rng.uniform((4, 1, 8, 8)) * 2.0 - 1.0
    eps = rng.normal(x0.shape, np.float64)
    worst = 0.0
    for n in (256, 1000, 7, 1):
        cfg = SamplerConfig(schedule=sched, steps=uniform_substeps(sched.T, n))
        x = q_sample(x0, sched.T, eps, sched)
        for t, t_prev in cfg.steps:
            x = reverse_step(x, eps, t, t_prev, cfg)
            want = q_sample(x0, t_prev, eps, sched) if t_prev else x0
            worst = max(worst, float(np.max(np.abs(x - want))))
    return SuiteResult("trajectory-identity", worst < 1e-5, f"max_abs_err={worst:.2e}")


def analytic_gaussian(n: int = 4096, mean: float = 0.3, std: float = 0.1, seed: int = 0) -> SuiteResult:
    """256-step DDIM with the closed-form Gaussian denoiser recovers N(mean, std^2)."""
    cfg = SamplerConfig()
    sched = cfg.schedule
    x_T = Rng(seed).split("gaussian").normal((n,), np.float64)
    x0 = ddim_sample(lambda x, t: analytic_gaussian_eps(x, t, mean, std, sched), x_T, cfg)
    m, s = float(x0.mean()), float(x0.std())
    ok = 0.28 <= m <= 0.32 and 0.08 <= s <= 0.12
    return SuiteResult("analytic-gaussian", ok, f"mean={m:.4f} std={s:.4f}")


def _tiny_models(seed: int, T: int) -> tuple[Denoiser, Denoiser]:
    cfg = DenoiserConfig(image_size=8, base_channels=8, channel_mult=(1, 2), res_blocks=1, time_dim=16)
    return (Denoiser(cfg, seed=seed, T=T, zero_init_out=False),
            Denoiser(cfg, seed=seed + 1, T=T, zero_init_out=False))


def guide_identity(seed: int = 0) -> SuiteResult:
    """The image model's guide equals the rearranged mask step at every step.

    Random untrained networks suffice: the identity is algebraic.  Checked
    unclamped, and with clamping against the clamped rearrangement.
    """
    mx, my = _tiny_models(seed, 1024)
    worst = 0.0
    for clamp in (False, True):
        cfg = SamplerConfig.make(n_steps=32, clamp=clamp, seed=seed)
        sched = cfg.schedule
        for rec in sample_paired(mx, my, cfg, n=3, trace=True):
            for s in rec.trace:
                ab = sched.alpha_bar(s.t_prev)
                implied = (s.x_prev - np.sqrt(1.0 - ab) * s.eps_x) / np.sqrt(ab)
                if clamp:
                    implied = np.clip(implied, -1.0, 1.0)
                worst = max(worst, float(np.max(np.abs(s.guide - implied))))
    return SuiteResult("guide-identity", worst < 1e-6, f"max_abs_err={worst:.2e}")


def paired_oracle(seed: int = 0) -> SuiteResult:
    """Perfect noise oracles started from a pair's own noised endpoints return the pair."""
    cfg = SamplerConfig()
    sched = cfg.schedule
    rng = Rng(seed).split("paired-oracle")
    x0 = np.where(rng.uniform((2, 1, 8, 8)) > 0.7, 1.0, -1.0)
    y0 = rng.uniform((2, 1, 8, 8)) * 2.0 - 1.0
    e1 = rng.normal(x0.shape, np.float64)
    e2 = rng.normal(y0.shape, np.float64)

    def oracle(clean):
        def eps(z, _guide, t):
            ab = sched.alpha_bar(t)
            return (z - np.sqrt(ab) * clean) / np.sqrt(1.0 - ab)
        return eps

    recs = paired_trajectory(oracle(x0), oracle(y0), q_sample(x0, sched.T, e1, sched),
                             q_sample(y0, sched.T, e2, sched), cfg)
    err = max(max(float(np.max(np.abs(r.raw_mask - x0[i, 0]))), float(np.max(np.abs(r.raw_image - y0[i, 0]))))
              for i, r in enumerate(recs))
    return SuiteResult("paired-oracle", err < 1e-5, f"max_abs_err={err:.2e}")


def _op_cases(rng: Rng) -> dict:
    def r(*shape):
        return tg.Tensor(rng.normal(shape, np.float64), requires_grad=True)

    ramp = tg.Tensor(np.linspace(-1.0, 1.0, 72).reshape(2, 4, 3, 3))
    return {
        "add": (lambda a, b: tg.sum_((a + b) * a), [r(3, 4), r(1, 4)]),
        "sub": (lambda a, b: tg.sum_((a - b) * (a - b * 2.0)), [r(3, 4), r(3, 4)]),
        "mul": (lambda a, b: tg.sum_(a * b * a), [r(2, 3, 1, 1), r(2, 3, 4, 4)]),
        "scale": (lambda a: tg.sum_(-(a * 0.7) * a), [r(5)]),
        "silu": (lambda a: tg.sum_(tg.silu(a) * tg.silu(a * 3.0)), [r(4, 6)]),
        "reshape+sum": (lambda a: tg.sum_(tg.sum_(a.reshape(3, 2, 4), axis=1).square()), [r(6, 4)]),
        "mean": (lambda a: tg.sum_(tg.mean(a, axis=(0, 2), keepdims=True).square()), [r(3, 4, 5)]),
        "getitem": (lambda a: tg.sum_(a[:, 1:3].square() + a[0:1, :1]), [r(3, 4)]),
        "concat": (lambda a, b: tg.sum_(tg.concat([a, b], axis=1).square() * tg.concat([b, a], axis=1)),
                   [r(2, 3, 2, 2), r(2, 3, 2, 2)]),
        "matmul": (lambda a, b: tg.sum_(tg.matmul(a, b).square()), [r(3, 4), r(4, 2)]),
        "linear": (lambda x, w, b: tg.sum_(tg.silu(tg.linear(x, w, b))), [r(3, 4), r(5, 4), r(5)]),
        "mse": (lambda a, b: tg.mse_loss(a, b), [r(2, 1, 4, 4), r(2, 1, 4, 4)]),
        "conv2d": (lambda x, w, b: tg.sum_(tg.conv2d(x, w, b).square()), [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        "conv2d/stride2": (lambda x, w: tg.sum_(tg.conv2d(x, w, stride=2, padding=1).square()),
                           [r(1, 2, 7, 7), r(3, 2, 3, 3)]),
        "group_norm": (lambda x, g, b: tg.sum_(tg.group_norm(x, g, b, 2) * ramp), [r(2, 4, 3, 3), r(4), r(4)]),
        "upsample2x": (lambda x: tg.sum_(tg.upsample2x(x).square() * tg.upsample2x(x * x)), [r(2, 2, 3, 3)]),
        "avg_pool2x": (lambda x: tg.sum_(tg.avg_pool2x(x * x).square()), [r(2, 2, 4, 6)]),
    }


def op_gradients(seed: int = 0) -> SuiteResult:
    """Every differentiable op against central differences, 64-bit, all entries."""
    worst, worst_op = 0.0, ""
    with tg.precision(np.float64):
        for name, (fn, params) in _op_cases(Rng(seed).split("ops")).items():
            err = max(check_gradients(lambda: fn(*params), params, h=1e-3))
            if err >= worst:
                worst, worst_op = err, name
    return SuiteResult("op-gradients", worst < 1e-5, f"max_rel_err={worst:.2e} ({worst_op})")


def denoiser_gradients(seed: int = 0, entries: int = 4) -> SuiteResult:
    """Taped denoiser gradients against central differences, 64-bit, 8x8 input.

    A 16-wide net is checked on ``entries`` random entries of every
    parameter tensor plus three random directions through all of them; the
    default-width net along one direction.  Width 16 keeps two channels
    per normalization group, so biases feeding a norm have non-zero gradient.
    """
    worst = 0.0
    with tg.precision(np.float64):
        rng = Rng(seed).split("gradcheck")
        primary = rng.normal((2, 1, 8, 8), np.float64)
        guide = rng.normal((2, 1, 8, 8), np.float64)
        target = tg.Tensor(rng.normal((2, 1, 8, 8), np.float64))
        t = np.array([3, 700])
        small = DenoiserConfig(image_size=8, base_channels=16, channel_mult=(1, 2), res_blocks=1, time_dim=8)
        for cfg, directions in ((small, 3), (DenoiserConfig(image_size=8), 1)):
            net = Denoiser(cfg, seed=seed, zero_init_out=False)
            loss = lambda: tg.mse_loss(net(primary, guide, t), target)
            if cfg is small:
                worst = max(check_gradients(loss, net.parameters(), h=1e-3, max_entries=entries,
                                            rng=np.random.default_rng(seed)))
            for k in range(directions):
                worst = max(worst, directional_check(loss, net.parameters(), h=1e-3, seed=seed + k))
    return SuiteResult("denoiser-gradients", worst < 1e-5, f"max_rel_err={worst:.2e}")


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "forward-marginals": forward_marginals,
    "trajectory-identity": trajectory_identity,
    "analytic-gaussian": analytic_gaussian,
    "guide-identity": guide_identity,
    "paired-oracle": paired_oracle,
    "op-gradients": op_gradients,
    "denoiser-gradients": denoiser_gradients,
}


def run_suites(names=None) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        start = time.perf_counter()
        res = SUITES[name]()
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results
