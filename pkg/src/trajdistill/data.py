"""Dataset ingestion, the toy generator, batch sampling, and synthetic-set state.

Dataset files are little-endian binary: magic "TGDDDATA", version u32=1,
N/C/H/W/num_classes u32, labels u32 x N, then f32 pixels in [0,1],
row-major. Pixels are promoted to float64 in memory and per-channel
normalization statistics are computed over the full set at load time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, ShapeError

DATASET_MAGIC = b"TGDDDATA"
DATASET_VERSION = 1

# Floor for per-channel std so normalization stays invertible on
# (degenerate) constant channels.
_STD_FLOOR = 1e-8


@dataclass
class LabeledDataset:
    """Images in [0,1] plus labels, normalization stats, and a class index."""

    images: np.ndarray          # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray          # (N,) int64
    num_classes: int
    mean: np.ndarray = field(init=False)   # (C,)
    std: np.ndarray = field(init=False)    # (C,)
    class_index: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N,C,H,W), got {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise FormatError("empty dataset")
        if self.labels.shape != (n,):
            raise ShapeError(f"{self.labels.shape} labels for {n} images")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError(f"label out of range [0, {self.num_classes})")
        self.mean = self.images.mean(axis=(0, 2, 3))
        self.std = np.maximum(self.images.std(axis=(0, 2, 3)), _STD_FLOOR)
        self.class_index = [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def __len__(self) -> int:
        return self.images.shape[0]

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, images: np.ndarray) -> np.ndarray:
        return images * self.std[:, None, None] + self.mean[:, None, None]


@dataclass
class ClassBatch:
    """A mini-batch of images all belonging to one class."""

    class_id: int
    images: Tensor              # (b, C, H, W), normalized
    source: str                 # "real" | "synthetic"
    indices: np.ndarray | None = None


@dataclass
class SyntheticSet:
    """Learnable pixel storage plus fixed labels.

    Storage lives in normalized space; slot s = c*ipc + k holds the k-th
    image of class c. For rho > 1 each slot is a rho x rho collage whose
    cells decode (upscale) into rho^2 training images.
    """

    storage: Tensor             # (ipc*num_classes, C, H, W), requires_grad
    labels: np.ndarray          # (ipc*num_classes,) int64, never optimized
    ipc: int
    num_classes: int
    rho: int
    mean: np.ndarray            # normalization stats of the source dataset
    std: np.ndarray

    def class_slots(self, c: int) -> np.ndarray:
        return np.arange(c * self.ipc, (c + 1) * self.ipc, dtype=np.int64)


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def save_dataset(images: np.ndarray, labels: np.ndarray, num_classes: int, path) -> None:
    """Write a dataset file; pixels are clipped to [0,1] and stored as f32."""
    n, c, h, w = images.shape
    pixels = np.clip(images, 0.0, 1.0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<6I", DATASET_VERSION, n, c, h, w, num_classes))
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(pixels).tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = len(DATASET_MAGIC)
    if blob[:pos] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic, not a dataset file")
    header_size = struct.calcsize("<6I")
    if len(blob) < pos + header_size:
        raise FormatError(f"{path}: truncated header")
    version, n, c, h, w, num_classes = struct.unpack_from("<6I", blob, pos)
    pos += header_size
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    if n == 0:
        raise FormatError(f"{path}: empty dataset")
    need = n * 4 + n * c * h * w * 4
    if len(blob) - pos != need:
        raise FormatError(f"{path}: payload is {len(blob) - pos} bytes, expected {need}")
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=pos).astype(np.int64)
    pos += n * 4
    pixels = np.frombuffer(blob, dtype="<f4", count=n * c * h * w, offset=pos)
    images = pixels.astype(np.float64).reshape(n, c, h, w)
    return LabeledDataset(images=images, labels=labels, num_classes=num_classes)


# ---------------------------------------------------------------------------
# Toy dataset
# ---------------------------------------------------------------------------

def generate_toy_dataset(seed_stream: np.random.Generator, num_classes: int, per_class: int,
                         size: tuple[int, int] = (16, 16), channels: int = 1,
                         noise_sigma: float = 0.15) -> LabeledDataset:
    """Class-separable sinusoid images.

    Class c is a plane wave with frequency 1 + c cycles across the image
    and orientation c*pi/num_classes; samples of a class differ by a
    uniform random phase plus optional Gaussian pixel noise, clipped to
    [0,1].
    """
    if num_classes < 2:
        raise ShapeError(f"need >= 2 classes, got {num_classes}")
    h, w = size
    uu, vv = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    images = np.empty((num_classes * per_class, channels, h, w))
    labels = np.repeat(np.arange(num_classes), per_class).astype(np.int64)
    for c in range(num_classes):
        freq = 1.0 + c
        theta = c * np.pi / num_classes
        track = uu * np.cos(theta) + vv * np.sin(theta)
        phases = seed_stream.uniform(0.0, 2.0 * np.pi, size=per_class)
        waves = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * track[None] + phases[:, None, None])
        block = np.repeat(waves[:, None], channels, axis=1)
        if noise_sigma > 0.0:
            block = block + seed_stream.normal(0.0, noise_sigma, size=block.shape)
        images[c * per_class:(c + 1) * per_class] = np.clip(block, 0.0, 1.0)
    return LabeledDataset(images=images, labels=labels, num_classes=num_classes)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_class_batch(dataset: LabeledDataset, c: int, b: int,
                       rng: np.random.Generator) -> ClassBatch:
    """b normalized images of class c, without replacement within the batch."""
    if c < 0 or c >= dataset.num_classes:
        raise ShapeError(f"unknown class {c}")
    pool = dataset.class_index[c]
    if pool.size == 0:
        raise ShapeError(f"class {c} is empty")
    if b <= pool.size:
        idx = pool[rng.permutation(pool.size)[:b]]
    else:
        idx = pool[rng.integers(0, pool.size, size=b)]
    images = dataset.normalize(dataset.images[idx])
    return ClassBatch(class_id=c, images=Tensor(images), source="real", indices=idx)


def _area_downscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downscale by an integer factor."""
    n, c, h, w = images.shape
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def init_synthetic(dataset: LabeledDataset, ipc: int, rho: int,
                   rng: np.random.Generator) -> SyntheticSet:
    """Fill storage with randomly selected real images (normalized).

    rho = 1 copies ipc images per class; rho > 1 packs rho^2 area-downscaled
    images per slot into its rho x rho grid.
    """
    if ipc < 1:
        raise ShapeError(f"ipc must be >= 1, got {ipc}")
    if rho < 1:
        raise ShapeError(f"rho must be >= 1, got {rho}")
    c_ch, h, w = dataset.image_shape
    if h % rho or w % rho:
        raise ShapeError(f"image size {(h, w)} not divisible by rho={rho}")
    per_class = ipc * rho * rho
    storage = np.empty((ipc * dataset.num_classes, c_ch, h, w))
    for c in range(dataset.num_classes):
        pool = dataset.class_index[c]
        if per_class <= pool.size:
            idx = pool[rng.permutation(pool.size)[:per_class]]
        else:
            idx = pool[rng.integers(0, pool.size, size=per_class)]
        picked = dataset.normalize(dataset.images[idx])
        if rho == 1:
            storage[c * ipc:(c + 1) * ipc] = picked
        else:
            small = _area_downscale(picked, rho)  # (ipc*rho^2, C, h/rho, w/rho)
            grid = small.reshape(ipc, rho, rho, c_ch, h // rho, w // rho)
            # cells (gi, gj) tile each slot row-major
            slot = grid.transpose(0, 3, 1, 4, 2, 5).reshape(ipc, c_ch, h, w)
            storage[c * ipc:(c + 1) * ipc] = slot
    labels = np.repeat(np.arange(dataset.num_classes), ipc).astype(np.int64)
    return SyntheticSet(
        storage=Tensor(storage, requires_grad=True),
        labels=labels, ipc=ipc, num_classes=dataset.num_classes, rho=rho,
        mean=dataset.mean.copy(), std=dataset.std.copy(),
    )
