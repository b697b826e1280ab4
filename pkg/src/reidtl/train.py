"""SGD training loop, augmentation, and the two-stepped / staged fine-tuning procedures."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from reidtl.data import Dataset, ImageRecord, merge_datasets
from reidtl.model import GROUPS, ReIDNet, combined_loss
from reidtl.sampler import BatchSampler, PairBatch

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AugmentBounds:
    """Random 2D affine jitter about the image centre."""

    max_translation: float = 0.05  # fraction of the side length
    min_scale: float = 0.95
    max_scale: float = 1.05
    max_rotation_deg: float = 5.0

    def __post_init__(self):
        if not 0 <= self.max_translation <= 0.5:
            raise ValueError(f"augment.bounds.max_translation must be in [0, 0.5], got {self.max_translation}")
        if not 0 < self.min_scale <= self.max_scale:
            raise ValueError(f"augment.bounds scale range [{self.min_scale}, {self.max_scale}] is invalid")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ValueError(f"augment.bounds.max_rotation_deg must be in [0, 180], got {self.max_rotation_deg}")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 1500
    step1_iters: int = 200
    step2_iters: int = 2000
    augmentations_per_image: int = 5
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_k: int = 8
    batch_m: int = 4
    head_init_scale: float = 0.01
    batch_seed: int | None = None  # sampler seed; defaults to ``seed``
    bounds: AugmentBounds = field(default_factory=AugmentBounds)

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError(f"train.initial_lr must be > 0, got {self.initial_lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"train.lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        for key in ("lr_decay_interval", "step1_iters", "step2_iters", "augmentations_per_image"):
            if getattr(self, key) < 0:
                raise ValueError(f"train.{key} must be >= 0")
        if self.lr_decay_interval == 0:
            raise ValueError("train.lr_decay_interval must be >= 1")

    @classmethod
    def full_scale(cls, large_target: bool = True, **overrides) -> TrainConfig:
        """Full-scale schedule: lr 1e-3 x0.1 every 40K; 20K/150K (large) or 20K/20K (small) steps, 32x2 batches."""
        base = dict(initial_lr=0.001, lr_decay_factor=0.1, lr_decay_interval=40_000,
                    step1_iters=20_000, step2_iters=150_000 if large_target else 20_000,
                    augmentations_per_image=5, batch_k=32, batch_m=2)
        base.update(overrides)
        return cls(**base)


def lr_at(cfg: TrainConfig, t: int) -> float:
    return cfg.initial_lr * cfg.lr_decay_factor ** (t // cfg.lr_decay_interval)


@dataclass(frozen=True)
class FreezePlan:
    frozen: tuple[str, ...]
    trainable: tuple[str, ...]

    def __post_init__(self):
        both = set(self.frozen) & set(self.trainable)
        if both:
            raise ValueError(f"groups both frozen and trainable: {sorted(both)}")

    @classmethod
    def only(cls, *trainable: str) -> FreezePlan:
        return cls(tuple(g for g in GROUPS if g not in trainable), tuple(trainable))

    @classmethod
    def all_trainable(cls) -> FreezePlan:
        return cls((), GROUPS)

    @classmethod
    def all_frozen(cls) -> FreezePlan:
        return cls(GROUPS, ())

    def check(self, model: ReIDNet) -> None:
        groups = set(model.param_groups())
        named = set(self.frozen) | set(self.trainable)
        if named != groups:
            raise ValueError(f"freeze plan must partition {sorted(groups)}, got {sorted(named)}")


HEAD_ONLY = FreezePlan.only("classification")


def augment(record: ImageRecord, count: int, rng: np.random.Generator,
            bounds: AugmentBounds | None = None) -> list[ImageRecord]:
    """``count`` randomly jittered copies of ``record`` (translation, scale, rotation about the centre)."""
    if count < 0:
        raise ValueError(f"augment count must be >= 0, got {count}")
    bounds = bounds or AugmentBounds()
    px = record.pixels
    h, w = px.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    out = []
    for k in range(count):
        s = rng.uniform(bounds.min_scale, bounds.max_scale)
        theta = math.radians(rng.uniform(-bounds.max_rotation_deg, bounds.max_rotation_deg))
        shift = rng.uniform(-bounds.max_translation, bounds.max_translation, size=2) * np.array([h, w])
        # output coord o maps to input coord A @ (o - centre - shift) + centre
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        a = rot / s
        offset = centre - a @ (centre + shift)
        channels = [
            ndimage.affine_transform(px[:, :, c], a, offset=offset, order=1, mode="nearest")
            for c in range(px.shape[2])
        ]
        pixels = np.clip(np.stack(channels, axis=2), 0.0, 1.0).astype(px.dtype)
        out.append(dataclasses.replace(record, image_id=f"{record.image_id}#aug{k}", pixels=pixels, path=None))
    return out


def augment_dataset(ds: Dataset, count: int, seed: int = 0, bounds: AugmentBounds | None = None) -> Dataset:
    """Originals followed, per image, by ``count`` augmented copies."""
    if count == 0:
        return ds
    rng = np.random.default_rng(seed)
    recs = []
    for r in ds.records:
        recs.append(r)
        recs.extend(augment(r, count, rng, bounds))
    return Dataset(recs, name=ds.name, image_size=ds.image_size)


@dataclass
class LossRecord:
    iteration: int
    lr: float
    total: float
    heads: dict[str, float]


def batch_tensors(batch: PairBatch, label_map: dict[int, int], dtype=torch.float32):
    x = torch.from_numpy(np.stack([r.pixels for r in batch.images]).transpose(0, 3, 1, 2).copy()).to(dtype)
    labels = torch.tensor([label_map[r.person_id] for r in batch.images], dtype=torch.long)
    return x, labels, batch.pairs, torch.from_numpy(batch.pair_targets)


def make_optimizer(model: ReIDNet, plan: FreezePlan, lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0) -> torch.optim.SGD | None:
    params = [p for g in plan.trainable for _, p in model.param_groups()[g]]
    if not params:
        return None
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def train_step(model: ReIDNet, batch: PairBatch, plan: FreezePlan, lr: float, label_map: dict[int, int],
               optimizer: torch.optim.Optimizer | None = None, rng: torch.Generator | None = None,
               iteration: int = 0) -> LossRecord:
    """One SGD update of the trainable groups. Frozen groups receive no gradient.

    Without an explicit optimizer, plain SGD (no momentum) is used for this step.
    """
    plan.check(model)
    groups = model.param_groups()
    for g, items in groups.items():
        for _, p in items:
            p.requires_grad_(g in plan.trainable)
    if optimizer is None:
        optimizer = make_optimizer(model, plan, lr, momentum=0.0)
    dtype = next(model.parameters()).dtype
    x, labels, pairs, targets = batch_tensors(batch, label_map, dtype)
    model.train()
    cfg = model.loss_config
    out = model(x, pairs=pairs if cfg.verification_weight > 0 else None, rng=rng)
    loss, breakdown = combined_loss(cfg, out, labels, targets)
    total = float(loss.detach())
    if not math.isfinite(total):
        raise TrainingDivergedError(f"iteration {iteration}: non-finite loss {total} (lr={lr}, heads={breakdown})")
    if optimizer is not None:
        for pg in optimizer.param_groups:
            pg["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
            optimizer.step()
    for _, items in groups.items():
        for _, p in items:
            p.requires_grad_(True)
    return LossRecord(iteration, lr, total, breakdown)


def label_map_for(ds: Dataset) -> dict[int, int]:
    return {pid: i for i, pid in enumerate(ds.person_ids)}


def fit(model: ReIDNet, ds: Dataset, cfg: TrainConfig, plan: FreezePlan, iters: int,
        start_iter: int = 0, seed_offset: int = 0, history: list | None = None,
        label_map: dict[int, int] | None = None, on_step=None) -> int:
    """Run ``iters`` momentum-SGD steps on identity-balanced batches; returns the next iteration index."""
    if iters == 0:
        return start_iter
    label_map = label_map or label_map_for(ds)
    k = min(cfg.batch_k, sum(1 for v in ds.by_identity().values() if len(v) >= cfg.batch_m))
    base = cfg.seed if cfg.batch_seed is None else cfg.batch_seed
    sampler = BatchSampler(ds, k, cfg.batch_m, seed=base + 7919 * seed_offset)
    gen = torch.Generator().manual_seed(cfg.seed + 104_729 * seed_offset + 1)
    opt = make_optimizer(model, plan, lr_at(cfg, start_iter), cfg.momentum, cfg.weight_decay)
    t = start_iter
    for _ in range(iters):
        rec = train_step(model, next(sampler), plan, lr_at(cfg, t), label_map, opt, gen, iteration=t)
        if history is not None:
            history.append(rec)
        if on_step is not None:
            on_step(model, rec)
        t += 1
    return t


def two_stepped_finetune(model: ReIDNet, target: Dataset, cfg: TrainConfig, history: list | None = None,
                         two_stepped: bool = True, start_iter: int = 0, seed_offset: int = 0,
                         augmented: Dataset | None = None, on_step=None) -> ReIDNet:
    """Replace the classifier with a fresh N_t-way head, train it alone, then train everything.

    With ``two_stepped=False`` the same total budget is spent training all
    groups from the start (the conventional one-stepped baseline).
    """
    if not target.labelled:
        raise ValueError(f"{target.name}: fine-tuning needs a labelled target dataset")
    n_t = target.num_identities
    if n_t == 0:
        raise ValueError(f"{target.name}: target has no identities")
    train_ds = augmented if augmented is not None else augment_dataset(
        target, cfg.augmentations_per_image, seed=cfg.seed + 31 * seed_offset, bounds=cfg.bounds)
    model.replace_classifier(n_t, cfg.head_init_scale, seed=cfg.seed + 17 + seed_offset)
    label_map = label_map_for(target)
    t = start_iter
    if two_stepped:
        t = fit(model, train_ds, cfg, HEAD_ONLY, cfg.step1_iters, t, 2 * seed_offset, history,
                label_map, on_step)
        fit(model, train_ds, cfg, FreezePlan.all_trainable(), cfg.step2_iters, t, 2 * seed_offset + 1,
            history, label_map, on_step)
    else:
        fit(model, train_ds, cfg, FreezePlan.all_trainable(), cfg.step1_iters + cfg.step2_iters, t,
            2 * seed_offset, history, label_map, on_step)
    return model


def staged_transfer(stages, model: ReIDNet, history: list | None = None, two_stepped: bool = True) -> ReIDNet:
    """Apply two-stepped fine-tuning stage by stage.

    ``stages`` is an ordered list of (datasets, TrainConfig); ``datasets`` may be one
    Dataset or a list, merged with identity offsetting.
    """
    if not stages:
        raise ValueError("staged transfer needs at least one stage")
    t = 0
    for s, (datasets, cfg) in enumerate(stages):
        if isinstance(datasets, Dataset):
            datasets = [datasets]
        ds = merge_datasets(list(datasets), name="+".join(d.name for d in datasets))
        log.info("stage %d: %s (%d ids, %d images)", s, ds.name, ds.num_identities, len(ds))
        two_stepped_finetune(model, ds, cfg, history, two_stepped, start_iter=t, seed_offset=s)
        t += cfg.step1_iters + cfg.step2_iters
    return model


def write_loss_log(history: list[LossRecord], path) -> Path:
    """CSV ``iter,lr,total_loss,<head losses...>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for rec in history for k in rec.heads})
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "lr", "total_loss", *keys])
        for rec in history:
            w.writerow([rec.iteration, repr(rec.lr), repr(rec.total),
                        *(repr(rec.heads[k]) if k in rec.heads else "" for k in keys)])
    return path
