"""Synthetic paired (mask, image) data and its on-disk format.

Images live in [-1, 1].  On disk an image is a 16-bit binary PGM with the
linear map ``[-1, 1] -> [0, 65535]``; a mask is an 8-bit PGM with values
{0, 255}.  A dataset directory holds ``masks/``, ``images/`` and a
``manifest.tsv``::

    # pairdiff-manifest v1
    # spec_hash=<sha256 of the generating spec, seed included>
    masks/00000.pgm<TAB>images/00000.pgm
    ...

Lesions are "low-contrast bright": each adds a fixed intensity offset over
a smoothed-noise background.  The offset ramps from 0 to 1 across a thin
band straddling the lesion boundary, and the mask is the set of pixels
where the ramp is at least one half.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError
from .rng import Rng

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# pairdiff-manifest v1"
MAX_PLACEMENT_TRIES = 32


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters.  Intensities are fractions of the [0, 1] range."""

    image_size: int = 16
    n_samples: int = 2048
    lesions_min: int = 1
    lesions_max: int = 1
    radius_min: float = 2.0
    radius_max: float = 2.5
    contrast_min: float = 0.25
    contrast_max: float = 0.35
    edge_width: float = 0.75
    background_level: tuple[float, float] = (0.3, 0.45)
    texture_scale: float = 1.5
    texture_amplitude: float = 0.03
    allow_empty: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "background_level", tuple(float(v) for v in self.background_level))
        self.validate()

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not 1 <= self.lesions_min <= self.lesions_max:
            raise ConfigError("need 1 <= lesions_min <= lesions_max")
        if not 2.0 <= self.radius_min <= self.radius_max:
            raise ConfigError("lesion radii must be >= 2 px and ordered")
        if not 0.0 < self.contrast_min <= self.contrast_max <= 0.5:
            raise ConfigError("contrast offsets must lie in (0, 0.5] and be ordered")
        if self.edge_width <= 0 or self.texture_scale <= 0 or self.texture_amplitude < 0:
            raise ConfigError("edge width and texture scale must be positive")
        lo, hi = self.background_level
        if not 0.0 <= lo <= hi or hi + self.contrast_max + 4 * self.texture_amplitude > 1.0:
            raise ConfigError("background level plus lesion contrast must stay inside [0, 1]")

    @property
    def threshold(self) -> float:
        """Half the mean lesion offset, in [-1, 1] image units."""
        return 0.5 * (self.contrast_min + self.contrast_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background_level"] = list(self.background_level)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class PairedBatch:
    masks: np.ndarray   # (B, 1, H, W), values in {-1, +1}
    images: np.ndarray  # (B, 1, H, W), values in [-1, 1]

    def __len__(self) -> int:
        return len(self.masks)

    def __post_init__(self):
        if self.masks.shape != self.images.shape or self.masks.ndim != 4:
            raise FormatError(f"mask batch {self.masks.shape} != image batch {self.images.shape}")


# -- generation ----------------------------------------------------------

def _signed_distance(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    """Approximate signed distance (px, positive inside) to an ellipse boundary."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    rho = np.sqrt(u * u + v * v)
    # first-order distance (1 - rho) / |grad rho|, with |grad rho| = sqrt(u²/rx² + v²/ry²) / rho
    grad = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = (1.0 - rho) * rho / grad
    return np.where(rho > 1e-9, dist, min(rx, ry))


def _background(spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    n = spec.image_size
    level = spec.background_level[0] + rng.uniform() * (spec.background_level[1] - spec.background_level[0])
    white = rng.normal((n, n), dtype=np.float64)
    smooth = ndimage.gaussian_filter(white, spec.texture_scale, mode="wrap")
    smooth /= smooth.std() + 1e-12
    return level + spec.texture_amplitude * smooth


def render_sample(spec: SyntheticSpec, rng: Rng) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """One (mask, image, lesions) triple in [-1, 1] units; mask may be empty."""
    n = spec.image_size
    base = _background(spec, rng)
    profile = np.zeros((n, n))
    offsets = np.zeros((n, n))
    lesions = []
    count = int(rng.integers(spec.lesions_min, spec.lesions_max + 1))
    for _ in range(count):
        for _attempt in range(MAX_PLACEMENT_TRIES):
            ry, rx = spec.radius_min + rng.uniform(2) * (spec.radius_max - spec.radius_min)
            angle = float(rng.uniform()) * math.pi
            reach = max(ry, rx) + 0.5 * spec.edge_width
            lo, hi = reach - 0.5, n - 0.5 - reach
            if hi <= lo:
                continue
            cy, cx = lo + rng.uniform(2) * (hi - lo)
            dist = _signed_distance(n, cy, cx, ry, rx, angle)
            ramp = np.clip(0.5 + dist / spec.edge_width, 0.0, 1.0)
            if np.any((ramp > 0) & (profile > 0)):
                continue
            contrast = spec.contrast_min + float(rng.uniform()) * (spec.contrast_max - spec.contrast_min)
            profile = np.maximum(profile, ramp)
            offsets = np.where(ramp > 0, contrast, offsets)
            lesions.append({"cy": float(cy), "cx": float(cx), "ry": float(ry), "rx": float(rx),
                            "angle": angle, "contrast": contrast})
            break
        else:
            log.info("could not place lesion after %d tries; skipping it", MAX_PLACEMENT_TRIES)
    intensity = np.clip(base + offsets * profile, 0.0, 1.0)
    mask = np.where(profile >= 0.5, 1.0, -1.0)
    return mask, 2.0 * intensity - 1.0, lesions


def generate_arrays(spec: SyntheticSpec) -> tuple[PairedBatch, list[list[dict]]]:
    """Generate ``spec.n_samples`` pairs in memory.

    Sample ``i`` draws from ``Rng(spec.seed).split(i)``; a sample whose
    lesions could not be placed is retried on stream ``split((i, retry))``.
    """
    root = Rng(spec.seed)
    masks, images, meta = [], [], []
    for i in range(spec.n_samples):
        for retry in range(MAX_PLACEMENT_TRIES):
            rng = root.split(i if retry == 0 else f"{i}/{retry}")
            mask, image, lesions = render_sample(spec, rng)
            if spec.allow_empty or np.any(mask > 0):
                break
            log.warning("sample %d came out empty; retrying", i)
        else:
            log.warning("sample %d skipped: no lesion could be placed", i)
            continue
        masks.append(mask)
        images.append(image)
        meta.append(lesions)
    n = spec.image_size
    batch = PairedBatch(np.asarray(masks, np.float32).reshape(-1, 1, n, n),
                        np.asarray(images, np.float32).reshape(-1, 1, n, n))
    return batch, meta


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write the dataset to ``out_dir`` and return the manifest path."""
    batch, _ = generate_arrays(spec)
    return write_dataset(batch, out_dir, header={"spec_hash": spec.hash()},
                         spec=spec.to_dict())


def write_dataset(batch: PairedBatch, out_dir, header: dict | None = None,
                  spec: dict | None = None, extra_columns: list[list[str]] | None = None) -> Path:
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for key, value in (header or {}).items():
        lines.append(f"# {key}={value}")
    for i in range(len(batch)):
        mpath, ipath = f"masks/{i:05d}.pgm", f"images/{i:05d}.pgm"
        save_mask(batch.masks[i, 0], out / mpath)
        save_image(batch.images[i, 0], out / ipath)
        cols = [mpath, ipath] + (extra_columns[i] if extra_columns else [])
        lines.append("\t".join(cols))
    if spec is not None:
        (out / "spec.json").write_text(json.dumps(spec, sort_keys=True, indent=1) + "\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# -- PGM I/O -------------------------------------------------------------

def _write_pgm(path, pixels: np.ndarray, maxval: int) -> None:
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header + pixels.astype(dtype).tobytes())


def _read_pgm(path) -> tuple[np.ndarray, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(tok) for tok in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    body = raw[pos:]
    if len(body) != w * h * dtype.itemsize:
        raise FormatError(f"{path}: expected {w * h * dtype.itemsize} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w), maxval


def _plane(x, dtype=None) -> np.ndarray:
    """Drop leading unit axes, e.g. (1, 1, H, W) -> (H, W)."""
    arr = np.asarray(getattr(x, "data", x), dtype=dtype)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


def save_image(image, path) -> None:
    """16-bit PGM, ``[-1, 1] -> [0, 65535]`` rounded to nearest."""
    arr = np.clip(_plane(image, np.float64), -1.0, 1.0)
    if arr.ndim != 2:
        raise FormatError(f"save_image expects a single 2-D image, got shape {arr.shape}")
    _write_pgm(path, np.rint((arr + 1.0) * 32767.5), 65535)


def load_image(path) -> np.ndarray:
    pix, maxval = _read_pgm(path)
    return (pix.astype(np.float64) / maxval * 2.0 - 1.0).astype(np.float32)


def save_mask(mask, path) -> None:
    """8-bit PGM; pixels above 0 become 255."""
    arr = _plane(mask)
    if arr.ndim != 2:
        raise FormatError(f"save_mask expects a single 2-D mask, got shape {arr.shape}")
    _write_pgm(path, np.where(arr > 0, 255, 0), 255)


def load_mask(path) -> np.ndarray:
    pix, _ = _read_pgm(path)
    if not np.all((pix == 0) | (pix == 255)):
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return np.where(pix > 0, 1.0, -1.0).astype(np.float32)


# -- manifests -----------------------------------------------------------

@dataclass
class Manifest:
    root: Path
    header: dict
    entries: list[list[str]]

    def __len__(self) -> int:
        return len(self.entries)


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing manifest header")
    header, entries = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise FormatError(f"{path}:{lineno}: expected mask<TAB>image")
        entries.append(cols)
    return Manifest(path.parent, header, entries)


def load_batch(manifest, indices=None) -> PairedBatch:
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    if indices is None:
        indices = range(len(manifest))
    masks, images = [], []
    for i in indices:
        try:
            mpath, ipath = manifest.entries[i][:2]
        except IndexError as exc:
            raise FormatError(f"manifest has no entry {i}") from exc
        masks.append(load_mask(manifest.root / mpath))
        images.append(load_image(manifest.root / ipath))
    if not masks:
        raise FormatError("empty selection")
    return PairedBatch(np.stack(masks)[:, None], np.stack(images)[:, None])


def annulus_gap(mask: np.ndarray, image: np.ndarray, inner: float = 1.0, outer: float = 3.0) -> float | None:
    """Mean image over the mask minus mean over pixels ``(inner, outer]`` px outside it.

    Returned in [0, 1] intensity units (half of [-1, 1] units); ``None``
    when either region is empty.
    """
    inside = np.asarray(mask) > 0
    if not inside.any():
        return None
    dist = ndimage.distance_transform_edt(~inside)
    ring = (dist > inner) & (dist <= outer)
    if not ring.any():
        return None
    return 0.5 * float(image[inside].mean() - image[ring].mean())
