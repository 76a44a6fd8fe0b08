"""The distillation loop: stage-wise distribution matching plus the
expert distribution constraint, optimizing synthetic pixels by SGD.

Each iteration samples a feature extractor from the trajectory store and
an expert from the window of snapshots that follows it. Per class, a
real mini-batch and the decoded synthetic slots are pushed through the
same sampled augmentation, the per-class embedding means are matched
(squared L2), the expert's cross-entropy on the synthetic batch is added
with weight alpha, and one SGD step updates the storage pixels.

Summation over classes is class-major and the per-class reductions use
numpy's pairwise sums, so a run is bitwise reproducible for a seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from . import autodiff as ad
from .augment import AugmentationParams
from .autodiff import Tape, Tensor
from .data import ClassBatch, LabeledDataset, SyntheticSet, init_synthetic, sample_class_batch
from .errors import CompatibilityError, ConfigError, NumericError, ShapeError
from .models import ModelSnapshot, forward_embed, forward_logits
from .optim import SGD
from .rng import stream
from .trajectory import TrajectoryStore, sample_expert, sample_extractor

REPORT_HEADER = "iter,ext_epoch,exp_epoch,l_mmd,l_sdc,l_total"


@dataclass
class DistillConfig:
    ipc: int
    iterations: int
    alpha: float = 2.5
    region_length: int = 7
    syn_lr: float = 0.01
    syn_momentum: float = 0.5
    rho: int = 1
    real_batch_per_class: int = 64
    seed: int = 0
    augment_in_sdc: bool = True
    dm_baseline_mode: bool = False
    lr_ipc_scaling: bool = True
    sdc_class_sum: bool = False

    def __post_init__(self):
        if self.ipc < 1:
            raise ConfigError(f"ipc must be >= 1, got {self.ipc}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.region_length < 1:
            raise ConfigError(f"region length must be >= 1, got {self.region_length}")
        if self.syn_lr <= 0.0:
            raise ConfigError(f"synthetic learning rate must be > 0, got {self.syn_lr}")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.dm_baseline_mode else self.alpha

    @property
    def effective_lr(self) -> float:
        return self.syn_lr * self.ipc if self.lr_ipc_scaling else self.syn_lr


@dataclass
class StepRecord:
    iteration: int
    ext_epoch: int
    exp_epoch: int
    l_mmd: float
    l_sdc: float
    l_total: float


@dataclass
class DistillReport:
    rows: list[StepRecord] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def to_csv(self, path) -> None:
        lines = [REPORT_HEADER]
        for r in self.rows:
            lines.append(f"{r.iteration},{r.ext_epoch},{r.exp_epoch},"
                         f"{r.l_mmd!r},{r.l_sdc!r},{r.l_total!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "DistillReport":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != REPORT_HEADER:
            raise ConfigError(f"{path}: not a distillation report")
        rows = []
        for line in lines[1:]:
            it, ee, xe, lm, ls, lt = line.split(",")
            rows.append(StepRecord(int(it), int(ee), int(xe), float(lm), float(ls), float(lt)))
        return cls(rows=rows)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mmd_loss(extractor: ModelSnapshot, real_batches: list[ClassBatch],
             syn_batches: list[ClassBatch]) -> Tensor:
    """Sum over classes of || mean embed(real) - mean embed(syn) ||^2.

    Real-side embeddings are constants: gradient reaches only the
    synthetic pixels. Batches are expected to be siamese-augmented
    already.
    """
    if [b.class_id for b in real_batches] != [b.class_id for b in syn_batches]:
        raise ShapeError("real and synthetic batch lists cover different classes")
    real_all = Tensor(np.concatenate([b.images.data for b in real_batches]))
    real_emb = forward_embed(extractor, real_all).data
    real_means = []
    row = 0
    for b in real_batches:
        n = b.images.shape[0]
        real_means.append(real_emb[row:row + n].mean(axis=0))
        row += n

    syn_all = ad.concat([b.images for b in syn_batches], axis=0)
    syn_emb = forward_embed(extractor, syn_all)
    loss = None
    row = 0
    for mean_ref, b in zip(real_means, syn_batches):
        n = b.images.shape[0]
        rows = ad.take_rows(syn_emb, np.arange(row, row + n))
        diff = ad.sub(ad.tmean(rows, axis=0), Tensor(mean_ref))
        term = ad.tsum(ad.mul(diff, diff))
        loss = term if loss is None else ad.add(loss, term)
        row += n
    return loss


def sdc_loss(expert: ModelSnapshot, syn_batches: list[ClassBatch],
             class_sum: bool = False) -> Tensor:
    """Expert cross-entropy on the synthetic batches.

    Default is the mean over all synthetic samples across classes;
    class_sum instead sums per-class means over the classes.
    """
    for b in syn_batches:
        if b.class_id >= expert.config.num_classes:
            raise ShapeError(f"batch class {b.class_id} outside expert's "
                             f"{expert.config.num_classes} classes")
    syn_all = ad.concat([b.images for b in syn_batches], axis=0)
    labels = np.concatenate([
        np.full(b.images.shape[0], b.class_id, dtype=np.int64) for b in syn_batches
    ])
    logits = forward_logits(expert, syn_all)
    if not class_sum:
        return ad.cross_entropy(logits, labels)
    loss = None
    row = 0
    for b in syn_batches:
        n = b.images.shape[0]
        part = ad.cross_entropy(ad.take_rows(logits, np.arange(row, row + n)),
                                labels[row:row + n])
        loss = part if loss is None else ad.add(loss, part)
        row += n
    return loss


def total_loss(l_mmd: Tensor, l_sdc: Tensor, alpha: float) -> Tensor:
    return l_mmd + float(alpha) * l_sdc


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------

@dataclass
class StepPlan:
    """The frozen randomness of one iteration: real batches + aug params."""

    real_batches: list[ClassBatch]
    aug_params: list[AugmentationParams]


def build_step_plan(dataset: LabeledDataset, cfg: DistillConfig,
                    real_rng, aug_rng) -> StepPlan:
    h, w = dataset.image_shape[1], dataset.image_shape[2]
    real_batches = []
    aug_params = []
    for c in range(dataset.num_classes):
        real_batches.append(sample_class_batch(dataset, c, cfg.real_batch_per_class, real_rng))
        aug_params.append(augment.sample_params(aug_rng, h, w))
    return StepPlan(real_batches=real_batches, aug_params=aug_params)


def evaluate_plan(plan: StepPlan, syn: SyntheticSet, extractor: ModelSnapshot,
                  expert: ModelSnapshot | None, cfg: DistillConfig):
    """Losses for one plan. Returns (total Tensor, mmd value, sdc value).

    Run inside a Tape to get gradients, or outside for values only.
    """
    alpha = cfg.effective_alpha
    real_aug = []
    syn_aug = []
    sdc_batches = []
    for c, (rb, params) in enumerate(zip(plan.real_batches, plan.aug_params)):
        decoded, _ = augment.decode(syn, syn.class_slots(c))
        real_aug.append(ClassBatch(c, augment.apply(rb.images, params), "real", rb.indices))
        sb = ClassBatch(c, augment.apply(decoded, params), "synthetic")
        syn_aug.append(sb)
        if alpha > 0.0:
            sdc_batches.append(sb if cfg.augment_in_sdc else ClassBatch(c, decoded, "synthetic"))

    l_mmd = mmd_loss(extractor, real_aug, syn_aug)
    if alpha > 0.0:
        if expert is None:
            raise ConfigError("alpha > 0 requires an expert snapshot")
        l_sdc = sdc_loss(expert, sdc_batches, class_sum=cfg.sdc_class_sum)
        total = total_loss(l_mmd, l_sdc, alpha)
        sdc_value = l_sdc.item()
    else:
        total = l_mmd
        sdc_value = 0.0
    return total, l_mmd.item(), sdc_value


def distill_step(syn: SyntheticSet, opt: SGD, extractor: ModelSnapshot,
                 expert: ModelSnapshot | None, plan: StepPlan, cfg: DistillConfig,
                 iteration: int) -> StepRecord:
    """Evaluate the plan, backprop into storage pixels, take one SGD step."""
    with Tape() as tape:
        total, mmd_value, sdc_value = evaluate_plan(plan, syn, extractor, expert, cfg)
        total_value = total.item()
        if not np.isfinite(total_value):
            raise NumericError(f"non-finite loss at iteration {iteration}")
        tape.backward(total)
    opt.step()
    return StepRecord(
        iteration=iteration,
        ext_epoch=extractor.epoch_index,
        exp_epoch=expert.epoch_index if expert is not None else 0,
        l_mmd=mmd_value, l_sdc=sdc_value, l_total=total_value,
    )


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

def check_compatible(store: TrajectoryStore, dataset: LabeledDataset) -> None:
    cfg = store.config
    if cfg.num_classes != dataset.num_classes:
        raise CompatibilityError(f"store has {cfg.num_classes} classes, dataset "
                                 f"{dataset.num_classes}")
    c, h, w = dataset.image_shape
    if (cfg.input_channels, cfg.input_size[0], cfg.input_size[1]) != (c, h, w):
        raise CompatibilityError(f"store expects input {cfg.input_channels}x{cfg.input_size}, "
                                 f"dataset is {c}x{(h, w)}")


def run(dataset: LabeledDataset, store: TrajectoryStore, cfg: DistillConfig,
        log=None) -> tuple[SyntheticSet, DistillReport]:
    """Initialize the synthetic set once, then `iterations` update steps."""
    check_compatible(store, dataset)
    if cfg.region_length > store.epochs + 1:
        raise ConfigError(f"region length {cfg.region_length} exceeds trajectory "
                          f"length {store.epochs + 1}")
    init_rng = stream(cfg.seed, "synthetic-init")
    ext_rng = stream(cfg.seed, "extractor-choice")
    exp_rng = stream(cfg.seed, "expert-choice")
    real_rng = stream(cfg.seed, "real-batch")
    aug_rng = stream(cfg.seed, "augment")

    t0 = time.perf_counter()
    syn = init_synthetic(dataset, cfg.ipc, cfg.rho, init_rng)
    opt = SGD({"synthetic.storage": syn.storage}, lr=cfg.effective_lr,
              momentum=cfg.syn_momentum, weight_decay=0.0)
    report = DistillReport()
    for it in range(1, cfg.iterations + 1):
        if cfg.dm_baseline_mode:
            i = int(ext_rng.integers(0, store.n_trajectories))
            extractor = store.get(i, 0)
            expert = None
        else:
            extractor, region = sample_extractor(store, cfg.region_length, ext_rng)
            expert = sample_expert(store, region, exp_rng) if cfg.effective_alpha > 0.0 else None
        plan = build_step_plan(dataset, cfg, real_rng, aug_rng)
        rec = distill_step(syn, opt, extractor, expert, plan, cfg, it)
        report.rows.append(rec)
        if log is not None and (it % 100 == 0 or it == cfg.iterations):
            log(f"iter {it}/{cfg.iterations} mmd {rec.l_mmd:.5f} "
                f"sdc {rec.l_sdc:.5f} total {rec.l_total:.5f}")
    report.wall_clock_seconds = time.perf_counter() - t0
    return syn, report
