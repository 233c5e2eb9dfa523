"""Time-conditioned U-Net epsilon-predictor with a two-channel input.

The same network serves as the mask model (primary = noisy mask, guide =
noisy image) and as the image model (primary = noisy image, guide = clean or
predicted mask).  The two channels are concatenated primary-first.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tg
from .errors import ConfigError, ContractError, FormatError
from .rng import Rng
from .serialize import read_tensor, write_tensor
from .tensor import Tensor

IN_CHANNELS = 2
OUT_CHANNELS = 1
CHECKPOINT_MAGIC = b"PDCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    base_channels: int = 32
    channel_mult: tuple[int, ...] | None = None
    res_blocks: int = 2
    time_dim: int = 64
    input_skip: bool = True

    def __post_init__(self):
        if self.channel_mult is None:
            levels = max(2, int(math.log2(max(self.image_size, 1))) - 2)
            object.__setattr__(self, "channel_mult", tuple(2 ** i for i in range(levels)))
        else:
            object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def validate(self) -> None:
        s = self.image_size
        if s < 4 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 4, got {s}")
        if self.levels < 2:
            raise ConfigError("the U-Net needs at least 2 resolution levels")
        if s >> (self.levels - 1) < 1:
            raise ConfigError(f"{self.levels} levels do not fit a {s}px image")
        if self.base_channels < 1 or self.res_blocks < 1 or min(self.channel_mult) < 1:
            raise ConfigError("channel widths and block counts must be positive")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        if d.get("channel_mult") is not None:
            d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


def time_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding: ``dim/2`` sines then ``dim/2`` cosines.

    ``t`` is a timestep or an integer array of them; the result has shape
    ``(dim,)`` or ``(len(t), dim)``.
    """
    if dim % 2:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ContractError(f"timestep out of range [1, {T}]: {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t_arr.astype(np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# -- layers --------------------------------------------------------------

class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _kaiming_uniform(shape, fan_in: int, rng: Rng) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    u = rng.uniform(shape)
    return ((2.0 * u - 1.0) * bound).astype(tg.default_dtype())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: Rng, zero_init: bool = False):
        shape = (cout, cin, k, k)
        w = np.zeros(shape, tg.default_dtype()) if zero_init else _kaiming_uniform(shape, cin * k * k, rng)
        self.weight = tg.parameter(w)
        self.bias = tg.parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return tg.conv2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: Rng):
        self.weight = tg.parameter(_kaiming_uniform((fout, fin), fin, rng))
        self.bias = tg.parameter(np.zeros(fout))

    def __call__(self, x: Tensor) -> Tensor:
        return tg.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int):
        self.groups = min(8, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = tg.parameter(np.ones(channels))
        self.beta = tg.parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return tg.group_norm(x, self.gamma, self.beta, self.groups)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, tdim: int, rng: Rng):
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.temb = Linear(tdim, cout, rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(tg.silu(self.norm1(x)))
        proj = self.temb(temb)
        h = h + proj.reshape(proj.shape[0], proj.shape[1], 1, 1)
        h = self.conv2(tg.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class UNet(Module):
    """Encoder-decoder with a skip connection per encoder residual block.

    Downsampling is 2x average pooling, upsampling nearest-neighbour.
    Each decoder block consumes the matching encoder output by channel
    concatenation.
    """

    def __init__(self, cfg: DenoiserConfig, rng: Rng, in_channels: int = IN_CHANNELS,
                 out_channels: int = OUT_CHANNELS, zero_init_out: bool = True):
        self.cfg = cfg
        base, tdim = cfg.base_channels, 4 * cfg.time_dim
        widths = [base * m for m in cfg.channel_mult]
        self.time1 = Linear(cfg.time_dim, tdim, rng)
        self.time2 = Linear(tdim, tdim, rng)
        self.conv_in = Conv2d(in_channels, base, 3, rng)

        self.down: list[ResBlock] = []
        skip_widths = []
        ch = base
        for width in widths:
            for _ in range(cfg.res_blocks):
                self.down.append(ResBlock(ch, width, tdim, rng))
                ch = width
                skip_widths.append(ch)

        self.mid = ResBlock(ch, ch, tdim, rng)

        self.up: list[ResBlock] = []
        for level in reversed(range(cfg.levels)):
            for _ in range(cfg.res_blocks):
                self.up.append(ResBlock(ch + skip_widths.pop(), widths[level], tdim, rng))
                ch = widths[level]

        self.norm_out = GroupNorm(ch)
        self.conv_out = Conv2d(ch, out_channels, 3, rng, zero_init=zero_init_out)
        # time-dependent gain on the primary input, added to the output
        self.skip_gain = Linear(tdim, out_channels, rng) if cfg.input_skip else None
        if self.skip_gain is not None and zero_init_out:
            self.skip_gain.weight.data[...] = 0.0

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        cfg = self.cfg
        emb = tg.silu(self.time2(tg.silu(self.time1(temb))))

        h = self.conv_in(x)
        skips = []
        blocks = iter(self.down)
        for level in range(cfg.levels):
            if level:
                h = tg.avg_pool2x(h)
            for _ in range(cfg.res_blocks):
                h = next(blocks)(h, emb)
                skips.append(h)

        h = self.mid(h, emb)

        blocks = iter(self.up)
        for level in reversed(range(cfg.levels)):
            for _ in range(cfg.res_blocks):
                h = next(blocks)(tg.concat([h, skips.pop()], axis=1), emb)
            if level:
                h = tg.upsample2x(h)

        out = self.conv_out(tg.silu(self.norm_out(h)))
        if self.skip_gain is None:
            return out
        gain = self.skip_gain(emb)
        return out + gain.reshape(gain.shape[0], gain.shape[1], 1, 1) * x[:, :gain.shape[1]]


class Denoiser(Module):
    """Epsilon-predictor ``net(primary, guide, t)``.

    ``t`` is a timestep or one timestep per batch row.  Inputs may be numpy
    arrays or tensors; arrays are cast to the network's dtype.
    """

    def __init__(self, cfg: DenoiserConfig | None = None, seed: int = 0, T: int = 1024,
                 zero_init_out: bool = True):
        self.cfg = cfg or DenoiserConfig()
        self.seed = int(seed)
        self.T = int(T)
        self.unet = UNet(self.cfg, Rng(self.seed).split("init"), zero_init_out=zero_init_out)

    @property
    def dtype(self):
        return self.unet.conv_in.weight.dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, primary, guide, t) -> Tensor:
        return self.forward(primary, guide, t)

    def forward(self, primary, guide, t) -> Tensor:
        dt = self.dtype
        primary = tg.as_tensor(primary, dtype=dt)
        guide = tg.as_tensor(guide, dtype=dt)
        if primary.shape != guide.shape:
            raise ContractError(f"primary {primary.shape} and guide {guide.shape} differ")
        size = self.cfg.image_size
        if primary.ndim != 4 or primary.shape[1] != 1 or primary.shape[2:] != (size, size):
            raise ContractError(f"expected (B, 1, {size}, {size}) input, got {primary.shape}")
        B = primary.shape[0]
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(B, int(t))
        if t.shape != (B,):
            raise ContractError(f"need one timestep per batch row, got shape {t.shape}")
        temb = tg.Tensor(time_embedding(t, self.cfg.time_dim, self.T), dtype=dt)
        return self.unet(tg.concat([primary, guide], axis=1), temb)

    def predict(self, primary, guide, t) -> np.ndarray:
        """Forward pass without taping; returns a plain array."""
        with tg.no_grad():
            return self.forward(primary, guide, t).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise FormatError(f"parameter table mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise FormatError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


# -- checkpoints ---------------------------------------------------------
#
#   b"PDCK" | u32 version | u32 n | n bytes JSON config block
#   | u64 training step | u64 seed | u32 count
#   | count x (u32 n | n bytes utf-8 name | PDT1 tensor blob)

def save_checkpoint(path, net: Denoiser, step: int = 0, meta: dict | None = None) -> None:
    block = {"denoiser": net.cfg.to_dict(), "T": net.T, "meta": meta or {}}
    cfg_bytes = json.dumps(block, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<QQ", int(step), net.seed))
    params = list(net.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, p.data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    """Returns the network and a dict with ``step``, ``seed``, ``T`` and ``meta``."""
    try:
        fh = io.BytesIO(Path(path).read_bytes())
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc

    def take(n):
        b = fh.read(n)
        if len(b) != n:
            raise FormatError(f"truncated checkpoint {path}")
        return b

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    version, n = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        block = json.loads(take(n).decode())
        cfg = DenoiserConfig.from_dict(block["denoiser"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint config block: {exc}") from exc
    step, seed = struct.unpack("<QQ", take(16))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        state[name] = read_tensor(fh)
    with tg.precision(np.float32):
        net = Denoiser(cfg, seed=seed, T=block["T"])
    net.load_state_dict(state)
    return net, {"step": step, "seed": seed, "T": block["T"], "meta": block.get("meta", {})}
