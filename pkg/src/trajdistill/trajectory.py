"""Expert trajectory pretraining, on-disk store, and snapshot sampling.

A trajectory is M+1 snapshots (epoch 0 through M) of one training run on
the real dataset. The store keeps each trajectory in its own directory
with a flat-text manifest describing the count, length, and network
config; sampling picks a feature extractor p[i,j] and an expert window
of L consecutive snapshots starting at it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import LabeledDataset
from .errors import ConfigError, FormatError, NumericError
from .models import ConvNetConfig, ModelSnapshot, build_convnet, forward_logits, load_snapshot, save_snapshot
from .optim import SGD
from .rng import stream

MANIFEST_NAME = "manifest"
DEFAULT_BATCH = 256


@dataclass
class TrainRecord:
    """Optimizer settings and per-epoch loss curve of one pretraining run."""

    lr: float
    momentum: float
    weight_decay: float
    epochs: int
    seed: int
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class ExpertTrajectory:
    traj_id: int
    snapshots: list[ModelSnapshot]   # epochs 0..M in order
    record: TrainRecord


@dataclass(frozen=True)
class ExpertRegion:
    """Snapshots {start_epoch .. start_epoch + length - 1} of one trajectory."""

    traj_id: int
    start_epoch: int
    length: int


def config_hash(config: ConvNetConfig) -> str:
    text = (f"depth={config.depth},width={config.width},num_classes={config.num_classes},"
            f"input_channels={config.input_channels},"
            f"input={config.input_size[0]}x{config.input_size[1]}")
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def train_trajectory(dataset: LabeledDataset, config: ConvNetConfig, epochs: int,
                     seed: int, traj_id: int = 0, lr: float = 0.01, momentum: float = 0.9,
                     weight_decay: float = 0.0005, batch_size: int = DEFAULT_BATCH,
                     use_augment: bool = False, log=None) -> ExpertTrajectory:
    """Train one expert and keep a snapshot after init and after every epoch."""
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    init_rng = stream(seed, f"trajectory-{traj_id}-init")
    shuffle_rng = stream(seed, f"trajectory-{traj_id}-shuffle")
    aug_rng = stream(seed, f"trajectory-{traj_id}-augment")

    model = build_convnet(config, init_rng).trainable_copy()
    opt = SGD(model.params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    record = TrainRecord(lr=lr, momentum=momentum, weight_decay=weight_decay,
                         epochs=epochs, seed=seed)
    snapshots = [model.frozen_copy(epoch_index=0)]

    n = len(dataset)
    images = dataset.normalize(dataset.images)
    for epoch in range(1, epochs + 1):
        perm = shuffle_rng.permutation(n)
        losses = []
        for b0 in range(0, n, batch_size):
            idx = perm[b0:b0 + batch_size]
            batch = Tensor(images[idx])
            if use_augment:
                params = augment.sample_params(aug_rng, batch.shape[2], batch.shape[3])
                batch = augment.apply(batch, params)
            with Tape() as tape:
                logits = forward_logits(model, batch)
                loss = ad.cross_entropy(logits, dataset.labels[idx])
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        record.epoch_losses.append(float(np.mean(losses)))
        snapshots.append(model.frozen_copy(epoch_index=epoch))
        if log is not None:
            log(f"trajectory {traj_id} epoch {epoch}/{epochs} loss {record.epoch_losses[-1]:.4f}")
    return ExpertTrajectory(traj_id=traj_id, snapshots=snapshots, record=record)


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class TrajectoryStore:
    """Directory of trajectories with a manifest; snapshots load lazily."""

    def __init__(self, root: Path, n_trajectories: int, epochs: int, config: ConvNetConfig):
        self.root = Path(root)
        self.n_trajectories = n_trajectories
        self.epochs = epochs
        self.config = config
        self._cache: dict[tuple[int, int], ModelSnapshot] = {}

    # -- persistence --------------------------------------------------------

    @staticmethod
    def snapshot_path(root: Path, i: int, j: int) -> Path:
        return Path(root) / f"traj_{i}" / f"epoch_{j}.snap"

    @classmethod
    def write(cls, root, trajectories: list[ExpertTrajectory]) -> "TrajectoryStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        if not trajectories:
            raise ConfigError("no trajectories to store")
        config = trajectories[0].snapshots[0].config
        epochs = len(trajectories[0].snapshots) - 1
        for i, traj in enumerate(trajectories):
            if len(traj.snapshots) != epochs + 1:
                raise ConfigError("trajectories have differing lengths")
            tdir = root / f"traj_{i}"
            tdir.mkdir(exist_ok=True)
            for j, snap in enumerate(traj.snapshots):
                save_snapshot(snap, cls.snapshot_path(root, i, j))
        store = cls(root, len(trajectories), epochs, config)
        store._write_manifest()
        return store

    def _write_manifest(self) -> None:
        cfg = self.config
        lines = [
            "version=1",
            f"n_trajectories={self.n_trajectories}",
            f"epochs={self.epochs}",
            f"depth={cfg.depth}",
            f"width={cfg.width}",
            f"num_classes={cfg.num_classes}",
            f"input_channels={cfg.input_channels}",
            f"input_h={cfg.input_size[0]}",
            f"input_w={cfg.input_size[1]}",
            f"config_hash={config_hash(cfg)}",
        ]
        (self.root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, root) -> "TrajectoryStore":
        root = Path(root)
        manifest = root / MANIFEST_NAME
        if not manifest.is_file():
            raise FormatError(f"{root}: missing store manifest")
        fields: dict[str, str] = {}
        for line in manifest.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{manifest}: bad manifest line {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
        try:
            if int(fields["version"]) != 1:
                raise FormatError(f"{manifest}: unsupported version {fields['version']}")
            n = int(fields["n_trajectories"])
            epochs = int(fields["epochs"])
            config = ConvNetConfig(
                depth=int(fields["depth"]), width=int(fields["width"]),
                num_classes=int(fields["num_classes"]),
                input_channels=int(fields["input_channels"]),
                input_size=(int(fields["input_h"]), int(fields["input_w"])),
            )
        except KeyError as exc:
            raise FormatError(f"{manifest}: missing field {exc}") from exc
        if fields.get("config_hash") != config_hash(config):
            raise FormatError(f"{manifest}: config hash mismatch")
        for i in range(n):
            for j in (0, epochs):
                p = cls.snapshot_path(root, i, j)
                if not p.is_file():
                    raise FormatError(f"{root}: manifest promises {p}, file missing")
        return cls(root, n, epochs, config)

    # -- access -------------------------------------------------------------

    def get(self, i: int, j: int) -> ModelSnapshot:
        key = (i, j)
        if key not in self._cache:
            snap = load_snapshot(self.snapshot_path(self.root, i, j))
            if snap.epoch_index != j:
                raise FormatError(f"{self.snapshot_path(self.root, i, j)}: epoch index "
                                  f"{snap.epoch_index} does not match filename")
            self._cache[key] = snap
        return self._cache[key]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_region_indices(n_trajectories: int, epochs: int, region_length: int,
                          rng: np.random.Generator) -> tuple[int, int]:
    """Uniform (trajectory, start epoch) with the whole region inside [0, M]."""
    if region_length < 1 or region_length > epochs + 1:
        raise ConfigError(f"region length {region_length} outside [1, {epochs + 1}]")
    i = int(rng.integers(0, n_trajectories))
    j = int(rng.integers(0, epochs - region_length + 2))
    return i, j


def sample_extractor(store: TrajectoryStore, region_length: int,
                     rng: np.random.Generator) -> tuple[ModelSnapshot, ExpertRegion]:
    """Pick the feature extractor p[i,j] and its expert region."""
    i, j = sample_region_indices(store.n_trajectories, store.epochs, region_length, rng)
    return store.get(i, j), ExpertRegion(traj_id=i, start_epoch=j, length=region_length)


def sample_expert(store: TrajectoryStore, region: ExpertRegion,
                  rng: np.random.Generator) -> ModelSnapshot:
    """Pick p[i, j+k] with k uniform over [0, L-1]."""
    k = int(rng.integers(0, region.length))
    return store.get(region.traj_id, region.start_epoch + k)
