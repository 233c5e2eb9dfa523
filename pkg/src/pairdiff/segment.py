"""Toy lesion segmentation, used to measure whether generated pairs help as training data.

A small fully convolutional net regresses the +-1 mask from the image
under a squared loss; the prediction is thresholded at 0 and scored by
Dice.  Nothing here is used by the generator itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tg
from .data import PairedBatch
from .denoiser import Conv2d, Module
from .errors import ConfigError, ContractError
from .optim import Adam
from .rng import Rng


@dataclass(frozen=True)
class SegConfig:
    width: int = 16
    layers: int = 4
    steps: int = 800
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.layers < 2:
            raise ConfigError("segmenter needs width >= 1 and at least 2 layers")
        if self.steps < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("segmenter steps, batch size and lr must be positive")


class SegNet(Module):
    """``layers`` 3x3 convs with SiLU between them; one output channel."""

    def __init__(self, cfg: SegConfig):
        rng = Rng(cfg.seed).split("segnet")
        widths = [1] + [cfg.width] * (cfg.layers - 1) + [1]
        self.convs = [Conv2d(a, b, 3, rng) for a, b in zip(widths, widths[1:])]

    def __call__(self, x) -> tg.Tensor:
        h = tg.as_tensor(x)
        for conv in self.convs[:-1]:
            h = tg.silu(conv(h))
        return self.convs[-1](h)

    def predict(self, images) -> np.ndarray:
        """Binary masks in {-1, 1}, shaped like ``images``."""
        with tg.no_grad():
            out = self(np.asarray(images, dtype=tg.default_dtype())).data
        return np.where(out > 0.0, 1.0, -1.0)


def train_segmenter(images, masks, cfg: SegConfig = SegConfig()) -> SegNet:
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks, dtype=np.float32)
    if images.shape != masks.shape or images.ndim != 4:
        raise ContractError(f"need matching (N, 1, H, W) images and masks, got {images.shape}, {masks.shape}")
    net = SegNet(cfg)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = Rng(cfg.seed).split("segtrain")
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(images), (cfg.batch_size,))
        loss = tg.mse_loss(net(images[idx]), masks[idx])
        loss.backward()
        opt.step()
        opt.zero_grad()
    return net


def dice(pred, truth) -> np.ndarray:
    """Per-image Dice of binary masks (> 0 is foreground); 1 when both are empty."""
    p = np.asarray(pred).reshape(len(pred), -1) > 0
    q = np.asarray(truth).reshape(len(truth), -1) > 0
    inter = (p & q).sum(1)
    total = p.sum(1) + q.sum(1)
    return np.where(total == 0, 1.0, 2.0 * inter / np.maximum(total, 1))


@dataclass
class AugmentationResult:
    dice_real: float
    dice_augmented: float

    @property
    def gain(self) -> float:
        return self.dice_augmented - self.dice_real


def augmentation_experiment(real: PairedBatch, generated: PairedBatch, test: PairedBatch,
                            cfg: SegConfig = SegConfig()) -> AugmentationResult:
    """Mean test Dice when training on ``real`` alone versus ``real`` plus ``generated``."""
    base = train_segmenter(real.images, real.masks, cfg)
    aug = train_segmenter(np.concatenate([real.images, generated.images]),
                          np.concatenate([real.masks, generated.masks]), cfg)
    return AugmentationResult(float(dice(base.predict(test.images), test.masks).mean()),
                              float(dice(aug.predict(test.images), test.masks).mean()))
