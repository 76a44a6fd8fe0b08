"""Differentiable siamese augmentation and multiformation decoding.

One transform is active per application. Within a distillation step the
same parameter object is applied to the real and the synthetic batch of
a class, so the transform cancels out of the distribution comparison.
All transforms are differentiable (almost everywhere) into the pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SyntheticSet
from .errors import ShapeError

TRANSFORMS = ("color", "crop", "cutout", "flip", "scale", "rotate")

CROP_PAD = 4
ROTATE_MAX_DEG = 15.0
SCALE_RANGE = (0.8, 1.2)
BRIGHTNESS_MAX = 0.3
SATURATION_RANGE = (0.5, 1.5)
CONTRAST_RANGE = (0.5, 1.5)


@dataclass
class AugmentationParams:
    """One sampled transform choice plus the scalars for every transform."""

    transform: str
    flip: int                  # {0, 1}
    angle_deg: float           # [-15, 15]
    scale: float               # [0.8, 1.2]
    crop_dy: int               # [0, 2*CROP_PAD]
    crop_dx: int
    cut_cy: int                # cutout box center, [0, H) / [0, W)
    cut_cx: int
    cut_size: int              # box side, fixed at image_side // 4
    brightness: float          # [-0.3, 0.3]
    saturation: float          # [0.5, 1.5]
    contrast: float            # [0.5, 1.5]


def sample_params(rng: np.random.Generator, height: int, width: int) -> AugmentationParams:
    """Uniform transform choice, then uniform scalars within their ranges."""
    transform = TRANSFORMS[int(rng.integers(0, len(TRANSFORMS)))]
    return AugmentationParams(
        transform=transform,
        flip=int(rng.integers(0, 2)),
        angle_deg=float(rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        crop_dy=int(rng.integers(0, 2 * CROP_PAD + 1)),
        crop_dx=int(rng.integers(0, 2 * CROP_PAD + 1)),
        cut_cy=int(rng.integers(0, height)),
        cut_cx=int(rng.integers(0, width)),
        cut_size=max(1, min(height, width) // 4),
        brightness=float(rng.uniform(-BRIGHTNESS_MAX, BRIGHTNESS_MAX)),
        saturation=float(rng.uniform(*SATURATION_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
    )


def apply(batch: Tensor, params: AugmentationParams) -> Tensor:
    """Apply the active transform of `params` to a (B,C,H,W) batch."""
    if batch.ndim != 4:
        raise ShapeError(f"augment expects a 4-D batch, got {batch.shape}")
    h, w = batch.shape[2], batch.shape[3]
    t = params.transform
    if t == "flip":
        return ad.flip_w(batch) if params.flip else batch
    if t == "rotate":
        a = np.deg2rad(params.angle_deg)
        # output->input map = rotation by -angle
        mat = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
        return ad.affine_sample(batch, mat)
    if t == "scale":
        mat = np.array([[1.0 / params.scale, 0.0], [0.0, 1.0 / params.scale]])
        return ad.affine_sample(batch, mat)
    if t == "crop":
        padded = ad.pad2d(batch, CROP_PAD)
        return ad.crop2d(padded, params.crop_dy, params.crop_dx, h, w)
    if t == "cutout":
        half = params.cut_size // 2
        y0 = max(0, params.cut_cy - half)
        y1 = min(h, params.cut_cy - half + params.cut_size)
        x0 = max(0, params.cut_cx - half)
        x1 = min(w, params.cut_cx - half + params.cut_size)
        mask = np.ones((h, w))
        mask[y0:y1, x0:x1] = 0.0
        # fill value 0 == dataset mean in normalized space
        return ad.mul(batch, Tensor(mask[None, None]))
    if t == "color":
        out = ad.add(batch, Tensor(np.float64(params.brightness)))
        ch_mean = ad.tmean(out, axis=1, keepdims=True)
        out = ad.add(ad.mul(ad.sub(out, ch_mean), Tensor(np.float64(params.saturation))), ch_mean)
        im_mean = ad.tmean(out, axis=(1, 2, 3), keepdims=True)
        out = ad.add(ad.mul(ad.sub(out, im_mean), Tensor(np.float64(params.contrast))), im_mean)
        return out
    raise ShapeError(f"unknown transform {t!r}")


# ---------------------------------------------------------------------------
# Multiformation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiformationCodec:
    """Splits each storage slot into rho^2 cells and upscales them."""

    rho: int
    channels: int
    height: int                # full output height (== storage height)
    width: int

    def __post_init__(self):
        if self.rho < 1:
            raise ShapeError(f"rho must be >= 1, got {self.rho}")
        if self.height % self.rho or self.width % self.rho:
            raise ShapeError(f"size {(self.height, self.width)} not divisible by rho={self.rho}")


def decode(syn: SyntheticSet, slots=None) -> tuple[Tensor, np.ndarray]:
    """Decode storage slots into training-resolution images plus labels.

    Output order is slot-major with the rho x rho cells row-major, so
    labels repeat rho^2 times per slot. rho = 1 returns the storage rows
    unchanged (the whole tensor when `slots` is None).
    """
    storage = syn.storage
    n, ch, h, w = storage.shape
    if slots is None:
        sliced = storage
        labels = syn.labels
        count = n
    else:
        slots = np.asarray(slots, dtype=np.int64)
        sliced = ad.take_rows(storage, slots)
        labels = syn.labels[slots]
        count = slots.size
    if syn.rho == 1:
        return sliced, labels.copy()
    rho = syn.rho
    sh, sw = h // rho, w // rho
    grid = ad.reshape(sliced, (count, ch, rho, sh, rho, sw))
    cells = ad.transpose(grid, (0, 2, 4, 1, 3, 5))         # (count, rho, rho, C, sh, sw)
    cells = ad.reshape(cells, (count * rho * rho, ch, sh, sw))
    images = ad.bilinear_resize(cells, h, w)
    return images, np.repeat(labels, rho * rho)
