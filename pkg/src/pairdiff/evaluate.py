"""Evaluation of generated pairs: pair consistency, FID-lite, mask diversity."""

from __future__ import annotations

import math
import typing
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import SyntheticSpec
from .errors import ContractError, FormatError

# Bump whenever image_features changes.
FEATURE_VERSION = 1
REPORT_VERSION = 1
DIAGONAL_LOADING = 1e-6
MASK_THRESHOLD = 0.0


def binarize(mask, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    return np.asarray(mask).squeeze() > threshold


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of boolean masks; two empty masks score 1."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def background_estimate(image: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Smooth background under bright blobs: a grey opening wider than any lesion.

    The opening removes structures narrower than the window; the subsequent
    Gaussian suppresses the flat-topped artifacts it leaves.
    """
    width = 2 * int(math.ceil(spec.radius_max + spec.edge_width)) + 1
    opened = ndimage.grey_opening(image, size=(width, width), mode="reflect")
    return ndimage.gaussian_filter(opened, spec.texture_scale, mode="reflect")


def extract_lesions(image, spec: SyntheticSpec) -> np.ndarray:
    """Pixels whose excess over the estimated background exceeds half the lesion offset."""
    img = np.asarray(image, dtype=np.float64).squeeze()
    # background_estimate is shift-equivariant, so a constant offset cancels here
    excess = img - background_estimate(img, spec)
    return excess >= spec.threshold


def pair_consistency(mask, image, spec: SyntheticSpec) -> float:
    """IoU between a binarized mask and the bright-anomaly region of its image.

    An empty mask scores 0 (see :func:`pair_consistency_scores` for flags).
    """
    m = binarize(mask)
    if not m.any():
        return 0.0
    return iou(m, extract_lesions(image, spec))


def pair_consistency_scores(masks, images, spec: SyntheticSpec) -> tuple[np.ndarray, int]:
    """Per-pair scores and the number of empty masks among them."""
    scores, empty = [], 0
    for m, img in zip(masks, images):
        if not binarize(m).any():
            empty += 1
        scores.append(pair_consistency(m, img, spec))
    return np.asarray(scores), empty


# -- FID-lite ------------------------------------------------------------

def image_features(images) -> np.ndarray:
    """Per image: 4x4 average-pooled grid (16) + mean, std, skewness, kurtosis (4)."""
    imgs = np.asarray(images, dtype=np.float64)
    imgs = imgs.reshape(imgs.shape[0], imgs.shape[-2], imgs.shape[-1])
    n, h, w = imgs.shape
    if h % 4 or w % 4:
        raise ContractError(f"image size {h}x{w} not divisible by 4")
    grid = imgs.reshape(n, 4, h // 4, 4, w // 4).mean(axis=(2, 4)).reshape(n, 16)
    flat = imgs.reshape(n, -1)
    mu = flat.mean(axis=1)
    sd = flat.std(axis=1)
    z = (flat - mu[:, None]) / np.maximum(sd, 1e-8)[:, None]
    skew = (z ** 3).mean(axis=1)
    kurt = (z ** 4).mean(axis=1) - 3.0
    return np.column_stack([grid, mu, sd, skew, kurt])


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    d = len(mu1)
    cov1 = cov1 + DIAGONAL_LOADING * np.eye(d)
    cov2 = cov2 + DIAGONAL_LOADING * np.eye(d)
    root1 = _sqrtm_psd(cov1)
    middle = root1 @ cov2 @ root1
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (middle + middle.T)), 0.0, None)).sum()
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * cross, 0.0))


def fid_lite(set_a, set_b, min_samples: int = 64) -> float:
    """Frechet distance between Gaussian fits of :func:`image_features`."""
    fa, fb = image_features(set_a), image_features(set_b)
    if len(fa) < min_samples or len(fb) < min_samples:
        raise ContractError(f"fid_lite needs >= {min_samples} samples per set, got {len(fa)}, {len(fb)}")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def diversity(masks: Sequence) -> float:
    """Mean pairwise ``1 - IoU`` over all mask pairs."""
    bins = [binarize(m) for m in masks]
    if len(bins) < 2:
        raise ContractError("diversity needs at least two masks")
    flat = np.stack([b.ravel() for b in bins]).astype(np.int64)
    inter = flat @ flat.T
    area = flat.sum(axis=1)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    iu = np.triu_indices(len(bins), k=1)
    return float(np.mean(1.0 - sim[iu]))


# -- report --------------------------------------------------------------

@dataclass
class EvalReport:
    pair_iou_mean: float
    pair_iou_sd: float
    fid_lite: float
    diversity: float
    n_samples: int
    empty_masks: int
    config_hash: str = ""
    report_version: int = REPORT_VERSION
    feature_version: int = FEATURE_VERSION

    def validate(self) -> None:
        if not (0.0 <= self.pair_iou_mean <= 1.0 and 0.0 <= self.diversity <= 1.0):
            raise ContractError("IoU metrics out of [0, 1]")
        if self.fid_lite < 0:
            raise ContractError("negative FID-lite")

    def to_text(self) -> str:
        """``key = value`` lines followed by one ``metric<TAB>name<TAB>value`` line per metric."""
        fields = asdict(self)
        lines = [f"{k} = {v}" for k, v in fields.items()]
        for name in ("pair_iou_mean", "pair_iou_sd", "fid_lite", "diversity"):
            lines.append(f"metric\t{name}\t{fields[name]:.9g}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "EvalReport":
        values = {}
        for line in Path(path).read_text().splitlines():
            key, sep, value = line.partition(" = ")
            if sep:
                values[key] = value
        types = typing.get_type_hints(cls)
        try:
            return cls(**{k: types[k](v) for k, v in values.items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed report {path}: {exc}") from exc


def evaluate(masks, images, real_images, spec: SyntheticSpec, config_hash: str = "",
             min_samples: int = 64) -> EvalReport:
    scores, empty = pair_consistency_scores(masks, images, spec)
    report = EvalReport(
        pair_iou_mean=float(scores.mean()),
        pair_iou_sd=float(scores.std()),
        fid_lite=fid_lite(images, real_images, min_samples),
        diversity=diversity(masks),
        n_samples=len(scores),
        empty_masks=empty,
        config_hash=config_hash,
    )
    report.validate()
    return report
