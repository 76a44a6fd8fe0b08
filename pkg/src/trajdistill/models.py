"""ConvNet construction, forward passes, and snapshot serialization.

The network is depth blocks of [3x3 conv -> instance norm -> ReLU ->
3x3/2 average pool] followed by a single linear head. The embedding map
is the flattened activation after the final pooling stage; the
classifier applies the head on top of it.

Snapshot files are little-endian binary: magic "TGDDSNAP", format
version u32=1, a config block of seven u32 fields (depth, width,
num_classes, input_channels, H, W, epoch_index), a tensor count, then
per tensor: name length u16, ASCII name, ndim u8, dims u32 each, f64
payload row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeError

SNAPSHOT_MAGIC = b"TGDDSNAP"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ConvNetConfig:
    depth: int
    num_classes: int
    input_channels: int
    input_size: tuple[int, int]
    width: int = 128

    def __post_init__(self):
        if self.depth < 1:
            raise ShapeError(f"depth must be >= 1, got {self.depth}")
        if self.num_classes < 2:
            raise ShapeError(f"need >= 2 classes, got {self.num_classes}")
        if self.input_channels < 1 or self.width < 1:
            raise ShapeError("channels and width must be positive")
        self.pooled_size()  # raises on spatial collapse

    def pooled_size(self) -> tuple[int, int]:
        """Spatial size after all pooling stages (each stage: ceil(n/2))."""
        h, w = self.input_size
        for _ in range(self.depth):
            if h < 1 or w < 1:
                raise ShapeError(f"spatial size collapsed below 1x1 at depth {self.depth}")
            h = -(-h // 2)
            w = -(-w // 2)
        if h < 1 or w < 1:
            raise ShapeError(f"spatial size collapsed below 1x1 at depth {self.depth}")
        return h, w

    @property
    def embed_dim(self) -> int:
        ph, pw = self.pooled_size()
        return self.width * ph * pw


@dataclass
class ModelSnapshot:
    """Full parameter set of a ConvNet at one training epoch."""

    config: ConvNetConfig
    params: dict[str, Tensor]
    epoch_index: int = 0

    def param_bytes(self) -> bytes:
        return b"".join(self.params[name].data.tobytes() for name in param_names(self.config))

    def trainable_copy(self) -> "ModelSnapshot":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return ModelSnapshot(self.config, params, self.epoch_index)

    def frozen_copy(self, epoch_index: int) -> "ModelSnapshot":
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return ModelSnapshot(self.config, params, epoch_index)


def param_shapes(config: ConvNetConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, fully determined by the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = config.input_channels
    for d in range(config.depth):
        shapes[f"conv{d}.weight"] = (config.width, cin, 3, 3)
        shapes[f"conv{d}.bias"] = (config.width,)
        shapes[f"norm{d}.scale"] = (config.width,)
        shapes[f"norm{d}.shift"] = (config.width,)
        cin = config.width
    shapes["head.weight"] = (config.num_classes, config.embed_dim)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def param_names(config: ConvNetConfig) -> list[str]:
    return list(param_shapes(config))


def build_convnet(config: ConvNetConfig, rng: np.random.Generator) -> ModelSnapshot:
    """Epoch-0 snapshot: He-normal conv/head weights, zero biases, unit norms."""
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".scale"):
            data = np.ones(shape)
        else:  # biases and norm shifts
            data = np.zeros(shape)
        params[name] = Tensor(data)
    return ModelSnapshot(config, params, epoch_index=0)


def _check_batch(model: ModelSnapshot, batch: Tensor) -> None:
    cfg = model.config
    expected = (cfg.input_channels,) + tuple(cfg.input_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"batch {batch.shape} does not match model input {expected}")


def forward_embed(model: ModelSnapshot, batch: Tensor,
                  collect_relu: list[Tensor] | None = None) -> Tensor:
    """Flattened activations after the last pooling stage.

    When `collect_relu` is given, each block's post-ReLU tensor is
    appended to it (used by the activation-ratio diagnostic).
    """
    _check_batch(model, batch)
    p = model.params
    h = batch
    for d in range(model.config.depth):
        h = ad.conv2d(h, p[f"conv{d}.weight"], p[f"conv{d}.bias"])
        h = ad.instance_norm(h, p[f"norm{d}.scale"], p[f"norm{d}.shift"])
        h = ad.relu(h)
        if collect_relu is not None:
            collect_relu.append(h)
        h = ad.avgpool2d(h)
    return ad.reshape(h, (batch.shape[0], model.config.embed_dim))


def forward_logits(model: ModelSnapshot, batch: Tensor,
                   collect_relu: list[Tensor] | None = None) -> Tensor:
    emb = forward_embed(model, batch, collect_relu)
    return ad.linear(emb, model.params["head.weight"], model.params["head.bias"])


# ---------------------------------------------------------------------------
# Snapshot file IO
# ---------------------------------------------------------------------------

def save_snapshot(model: ModelSnapshot, path) -> None:
    cfg = model.config
    chunks = [SNAPSHOT_MAGIC, struct.pack("<I", SNAPSHOT_VERSION)]
    chunks.append(struct.pack(
        "<7I", cfg.depth, cfg.width, cfg.num_classes, cfg.input_channels,
        cfg.input_size[0], cfg.input_size[1], model.epoch_index,
    ))
    names = param_names(cfg)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name].data
        encoded = name.encode("ascii")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated file (needed {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_snapshot(path) -> ModelSnapshot:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a snapshot file")
    (version,) = rd.unpack("<I")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{path}: unsupported snapshot version {version}")
    depth, width, num_classes, cin, h, w, epoch = rd.unpack("<7I")
    try:
        config = ConvNetConfig(depth=depth, width=width, num_classes=num_classes,
                               input_channels=cin, input_size=(h, w))
    except ShapeError as exc:
        raise FormatError(f"{path}: invalid config in header: {exc}") from exc
    expected = param_shapes(config)
    (count,) = rd.unpack("<I")
    if count != len(expected):
        raise FormatError(f"{path}: header declares {count} tensors, config implies {len(expected)}")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("ascii")
        if name not in expected:
            raise FormatError(f"{path}: unexpected tensor {name!r} for header config")
        (ndim,) = rd.unpack("<B")
        dims = rd.unpack(f"<{ndim}I")
        if dims != expected[name]:
            raise FormatError(f"{path}: tensor {name!r} has shape {dims}, expected {expected[name]}")
        payload = rd.take(8 * int(np.prod(dims, dtype=np.int64)))
        params[name] = Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims).copy())
    if rd.pos != len(rd.blob):
        raise FormatError(f"{path}: {len(rd.blob) - rd.pos} trailing bytes after last tensor")
    return ModelSnapshot(config, params, epoch_index=epoch)
