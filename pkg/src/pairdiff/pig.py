"""Paired image generation: two diffusion models that guide each other.

``x`` is always the lesion mask and ``y`` the image.  The mask model
(the *guider*) predicts the noise in ``x_t`` from ``(x_t, y_t, t)``; the
image model predicts the noise in ``y_t`` from ``(y_t, x0, t)``, with the
clean mask as guide during training and the mask model's running clean
estimate during sampling.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tg
from .data import PairedBatch, write_dataset
from .denoiser import Denoiser, DenoiserConfig, save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .optim import Adam
from .rng import Rng
from .sampler import SamplerConfig, predict_x0, reverse_step
from .schedule import linear_schedule, q_sample

log = logging.getLogger(__name__)

ROLES = ("guider", "cond", "uncond")
LR_SCHEDULES = ("constant", "cosine")

EpsFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    model: str = "guider"
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    seed: int = 0
    checkpoint_every: int = 0
    T: int = 1024
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.model not in ROLES:
            raise ConfigError(f"model must be one of {ROLES}, got {self.model!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"total steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint cadence must be >= 0")


@dataclass
class TrainResult:
    net: Denoiser
    losses: list[float]
    normal_draws: int
    wall_time: float


def _model_inputs(role: str, x0, y0, x_t, y_t):
    """(primary, guide) for each role; the channel order is fixed."""
    if role == "guider":
        return x_t, y_t
    if role == "cond":
        return y_t, x0
    return y_t, np.zeros_like(y_t)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 1-based ``step``; cosine decays from ``lr`` towards 0."""
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / cfg.steps))
    return cfg.lr


def train_model(data: PairedBatch, cfg: TrainConfig, net_cfg: DenoiserConfig | None = None,
                out_dir=None, meta: dict | None = None,
                on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fixed-budget Adam training of one denoiser.

    Every step draws a batch of pairs, one timestep per pair uniform on
    ``1..T``, and two independent noises ``eps1`` (mask) and ``eps2``
    (image) so both channels are noised at the same ``t``.  The guider
    regresses ``eps1``; the other roles regress ``eps2``.
    """
    net_cfg = net_cfg or DenoiserConfig(image_size=data.masks.shape[-1])
    if data.masks.shape[1:] != (1, net_cfg.image_size, net_cfg.image_size):
        raise ContractError(f"data shape {data.masks.shape[1:]} does not fit a {net_cfg.image_size}px model")
    sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    net = Denoiser(net_cfg, seed=cfg.seed, T=cfg.T)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = Rng(cfg.seed).split("train")
    out = Path(out_dir) if out_dir is not None else None
    ckpt_meta = {"role": cfg.model, "train": asdict(cfg), **(meta or {})}

    masks = data.masks.astype(np.float32, copy=False)
    images = data.images.astype(np.float32, copy=False)
    shape = (cfg.batch_size,) + masks.shape[1:]
    losses = []
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        opt.state.lr = learning_rate(cfg, step)
        idx = rng.integers(0, len(masks), (cfg.batch_size,))
        t = rng.integers(1, cfg.T + 1, (cfg.batch_size,))
        eps1 = rng.normal(shape, dtype=np.float32)
        eps2 = rng.normal(shape, dtype=np.float32)
        x0, y0 = masks[idx], images[idx]
        x_t = q_sample(x0, t, eps1, sched)
        y_t = q_sample(y0, t, eps2, sched)
        primary, guide = _model_inputs(cfg.model, x0, y0, x_t, y_t)
        target = eps1 if cfg.model == "guider" else eps2

        pred = net(primary, guide, t)
        loss = tg.mse_loss(pred, target)
        value = loss.item()
        if not np.isfinite(value):
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(out / "diagnostic.pdck", net, step, ckpt_meta)
            raise NumericError(f"loss became {value} at step {step}")
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / f"step{step:06d}.pdck", net, step, ckpt_meta)
    wall = time.perf_counter() - start
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.pdck", net, cfg.steps, ckpt_meta)
    return TrainResult(net, losses, rng.calls["normal"], wall)


def train_guider(data: PairedBatch, cfg: TrainConfig, net_cfg=None, **kw) -> TrainResult:
    return train_model(data, _with_role(cfg, "guider"), net_cfg, **kw)


def train_conditional(data: PairedBatch, cfg: TrainConfig, net_cfg=None, **kw) -> TrainResult:
    return train_model(data, _with_role(cfg, "cond"), net_cfg, **kw)


def train_unconditional(data: PairedBatch, cfg: TrainConfig, net_cfg=None, **kw) -> TrainResult:
    """Single-model image baseline: the guide channel is held at zero."""
    return train_model(data, _with_role(cfg, "uncond"), net_cfg, **kw)


def _with_role(cfg: TrainConfig, role: str) -> TrainConfig:
    d = asdict(cfg)
    d["model"] = role
    return TrainConfig(**d)


def held_out_loss(net: Denoiser, data: PairedBatch, role: str, seed: int = 0, batch_size: int = 64,
                  guide_order: np.ndarray | None = None) -> float:
    """Mean training loss of ``net`` in ``role`` over every pair of ``data``.

    Timesteps and noises come from ``seed`` alone, so two calls differing
    only in ``guide_order`` (a permutation of the clean masks used as the
    guide) see identical draws.
    """
    if role not in ROLES:
        raise ConfigError(f"role must be one of {ROLES}, got {role!r}")
    sched = linear_schedule(net.T)
    rng = Rng(seed).split("held-out-loss")
    masks = data.masks.astype(np.float32, copy=False)
    images = data.images.astype(np.float32, copy=False)
    guides = masks if guide_order is None else masks[guide_order]
    total = 0.0
    for lo in range(0, len(masks), batch_size):
        x0, y0, g0 = masks[lo:lo + batch_size], images[lo:lo + batch_size], guides[lo:lo + batch_size]
        t = rng.integers(1, net.T + 1, (len(x0),))
        eps1 = rng.normal(x0.shape, dtype=np.float32)
        eps2 = rng.normal(x0.shape, dtype=np.float32)
        x_t, y_t = q_sample(x0, t, eps1, sched), q_sample(y0, t, eps2, sched)
        primary, guide = _model_inputs(role, g0, y0, x_t, y_t)
        target = eps1 if role == "guider" else eps2
        total += float(((net.predict(primary, guide, t) - target) ** 2).sum())
    return total / masks.size


# -- sampling ------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    t_prev: int
    x_t: np.ndarray
    eps_x: np.ndarray
    x0_hat: np.ndarray
    x_prev: np.ndarray
    y_t: np.ndarray
    guide: np.ndarray
    eps_y: np.ndarray
    y0_hat: np.ndarray
    y_prev: np.ndarray


@dataclass
class SampleRecord:
    mask: np.ndarray       # clamped to [-1, 1]
    image: np.ndarray      # clamped to [-1, 1]
    seed: int
    raw_mask: np.ndarray
    raw_image: np.ndarray
    trace: list[StepRecord] | None = field(default=None, repr=False)

    def binary_mask(self) -> np.ndarray:
        return np.where(self.mask > 0.0, 1.0, -1.0)


def _check_models(cfg: SamplerConfig, *models: Denoiser) -> int:
    sizes = {m.cfg.image_size for m in models}
    if len(sizes) != 1:
        raise ConfigError(f"models disagree on image size: {sorted(sizes)}")
    for m in models:
        if m.T != cfg.schedule.T:
            raise ConfigError(f"model trained with T={m.T}, sampler uses T={cfg.schedule.T}")
    return sizes.pop()


def _seeds(cfg: SamplerConfig, n, seeds) -> list[int]:
    if seeds is None:
        if n is None or n < 1:
            raise ContractError("give n >= 1 or an explicit seed list")
        return [cfg.seed + i for i in range(n)]
    return [int(s) for s in seeds]


def sample_paired(model_x: Denoiser, model_y: Denoiser, cfg: SamplerConfig, n: int | None = None,
                  seeds: Sequence[int] | None = None, batch_size: int = 64,
                  trace: bool = False) -> list[SampleRecord]:
    """Mutually guided DDIM sampling of (mask, image) pairs.

    Pair ``i`` starts from ``x_T, y_T`` drawn (in that order) from
    ``Rng(seeds[i])``; the default seeds are ``cfg.seed + i``.  Per step the
    mask model sees ``(x_t, y_t)``; its clean estimate, clamped when
    ``cfg.clamp`` is set, guides the image model at the same ``t``.
    """
    size = _check_models(cfg, model_x, model_y)
    seeds = _seeds(cfg, n, seeds)
    records = []
    for lo in range(0, len(seeds), batch_size):
        chunk = seeds[lo:lo + batch_size]
        rngs = [Rng(s) for s in chunk]
        shape = (1, size, size)
        xy = np.stack([np.concatenate([r.normal(shape, np.float64), r.normal(shape, np.float64)]) for r in rngs])
        records.extend(paired_trajectory(_per_pair(model_x), _per_pair(model_y), xy[:, :1], xy[:, 1:], cfg,
                                         rngs, chunk, trace))
    return records


def _per_pair(model: Denoiser) -> EpsFn:
    """``model.predict`` applied one pair at a time.

    BLAS results depend on the batch shape in the last bits, and the
    reverse loop amplifies them; per-pair calls keep a pair's trajectory
    independent of what it is batched with.
    """
    def eps(primary, guide, t):
        return np.concatenate([model.predict(primary[i:i + 1], guide[i:i + 1], t) for i in range(len(primary))])
    return eps


def paired_trajectory(eps_x: EpsFn, eps_y: EpsFn, x_T, y_T, cfg: SamplerConfig,
                      rngs: Sequence[Rng] | None = None, seeds: Sequence[int] | None = None,
                      trace: bool = False) -> list[SampleRecord]:
    """The reverse loop of paired sampling from given endpoints.

    ``eps_x(x_t, y_t, t)`` and ``eps_y(y_t, guide, t)`` return noise
    predictions shaped like their first argument; ``x_T, y_T`` are
    (B, 1, H, W).  ``rngs`` (one per pair) is only used in stochastic mode.
    """
    sched = cfg.schedule
    x = np.asarray(x_T, dtype=np.float64)
    y = np.asarray(y_T, dtype=np.float64)
    seeds = list(seeds) if seeds is not None else [-1] * len(x)
    steps: list[list[StepRecord]] = [[] for _ in seeds]
    x0_hat, y0_hat = x, y
    for t, t_prev in cfg.steps:
        e_x = np.asarray(eps_x(x, y, t), dtype=np.float64)
        x0_hat = predict_x0(x, e_x, t, sched)
        x_prev = _step(x, e_x, x0_hat, t, t_prev, cfg, rngs)
        guide = np.clip(x0_hat, -1.0, 1.0) if cfg.clamp else x0_hat
        e_y = np.asarray(eps_y(y, guide, t), dtype=np.float64)
        y0_hat = predict_x0(y, e_y, t, sched)
        y_prev = _step(y, e_y, y0_hat, t, t_prev, cfg, rngs)
        if trace:
            for i in range(len(seeds)):
                steps[i].append(StepRecord(t, t_prev, x[i, 0], e_x[i, 0], x0_hat[i, 0], x_prev[i, 0],
                                           y[i, 0], guide[i, 0], e_y[i, 0], y0_hat[i, 0], y_prev[i, 0]))
        x, y = x_prev, y_prev
    return [SampleRecord(np.clip(x0_hat[i, 0], -1, 1), np.clip(y0_hat[i, 0], -1, 1), s,
                         x0_hat[i, 0], y0_hat[i, 0], steps[i] if trace else None)
            for i, s in enumerate(seeds)]


def _step(x, eps, x0_hat, t, t_prev, cfg: SamplerConfig, rngs):
    if not cfg.stochastic:
        return reverse_step(x, eps, t, t_prev, cfg, x0_hat=x0_hat)
    if rngs is None or len(rngs) != len(x):
        raise ContractError("stochastic sampling needs one rng per pair")
    return np.stack([reverse_step(x[i], eps[i], t, t_prev, cfg, rng=r, x0_hat=x0_hat[i])
                     for i, r in enumerate(rngs)])


def sample_unconditional(model: Denoiser, cfg: SamplerConfig, n: int | None = None,
                         seeds: Sequence[int] | None = None, batch_size: int = 64) -> np.ndarray:
    """Images from the single-model baseline, shape (n, H, W), clamped."""
    size = _check_models(cfg, model)
    seeds = _seeds(cfg, n, seeds)
    out = []
    for lo in range(0, len(seeds), batch_size):
        rngs = [Rng(s) for s in seeds[lo:lo + batch_size]]
        y = np.stack([r.normal((1, size, size), np.float64) for r in rngs])
        zeros = np.zeros_like(y)
        y0 = y
        for t, t_prev in cfg.steps:
            eps = _per_pair(model)(y, zeros, t).astype(np.float64)
            y0 = predict_x0(y, eps, t, cfg.schedule)
            y = _step(y, eps, y0, t, t_prev, cfg, rngs)
        out.append(np.clip(y0[:, 0], -1.0, 1.0))
    return np.concatenate(out)


def write_samples(records: Sequence[SampleRecord], out_dir, config_hash: str = "") -> Path:
    """Mask/image PGM pairs plus a manifest whose third column is the pair's seed."""
    size = records[0].mask.shape[-1]
    batch = PairedBatch(np.stack([r.binary_mask() for r in records]).reshape(-1, 1, size, size),
                        np.stack([r.image for r in records]).reshape(-1, 1, size, size))
    return write_dataset(batch, out_dir, header={"config_hash": config_hash, "kind": "samples"},
                         extra_columns=[[str(r.seed)] for r in records])
