"""Scaled-down synthetic benchmarks for the loss, fine-tuning and co-training ablations.

Each runner builds its own data from the seed and returns one dict of rank-1
scores per seed, so scripts and tests share the exact same protocol.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace

import numpy as np

from reidtl.adapt.cotrain import co_train, self_train, subspace_codes
from reidtl.data import SyntheticSpec, generate_synthetic, make_probe_gallery, split_identities
from reidtl.evaluation import evaluate, evaluate_features
from reidtl.model import LossConfig, build_model
from reidtl.train import TrainConfig, two_stepped_finetune

log = logging.getLogger(__name__)

LOSS_VARIANTS = {"SID": LossConfig(0.0, 1.0), "PV": LossConfig(1.0, 0.0), "SID+PV": LossConfig(3.0, 1.0)}


@dataclass(frozen=True)
class BenchConfig:
    num_train_ids: int = 30
    num_test_ids: int = 50
    images_per_camera: int = 4
    noise: float = 0.4
    camera_shift: float = 1.0
    iters: int = 1000
    verif_hidden: int = 32
    augmentations_per_image: int = 5


def _test_split(ds, num_test, seed):
    train, test = split_identities(ds, num_test, seed)
    probe, gallery = make_probe_gallery(test, "single_shot", seed)
    return train, probe, gallery


def loss_ablation(seed: int, cfg: BenchConfig = BenchConfig()) -> dict[str, float]:
    """Rank-1 of identification-only, verification-only and the combined loss on one seed."""
    ds = generate_synthetic(SyntheticSpec(
        num_identities=cfg.num_train_ids + cfg.num_test_ids, images_per_identity_per_camera=cfg.images_per_camera,
        num_cameras=2, cross_view_noise=cfg.noise, camera_shift=cfg.camera_shift, seed=seed))
    train, probe, gallery = _test_split(ds, cfg.num_test_ids, seed)
    tc = TrainConfig(step1_iters=0, step2_iters=cfg.iters, seed=seed,
                     augmentations_per_image=cfg.augmentations_per_image)
    out = {}
    for name, loss in LOSS_VARIANTS.items():
        model = build_model(num_classes=cfg.num_train_ids, loss=loss, verif_hidden=cfg.verif_hidden, seed=seed)
        two_stepped_finetune(model, train, tc)
        out[name] = evaluate(model, probe, gallery).rank1
    log.info("loss ablation seed %d: %s", seed, out)
    return out


@dataclass(frozen=True)
class TransferBench:
    source_ids: int = 60
    source_images_per_camera: int = 4
    source_iters: int = 1000
    target_train_ids: int = 10
    target_images_per_camera: int = 2
    num_test_ids: int = 50
    noise: float = 0.4
    camera_shift: float = 1.0
    verif_hidden: int = 32
    finetune: TrainConfig = TrainConfig(step1_iters=200, step2_iters=300, initial_lr=0.003,
                                        head_init_scale=0.2)


def source_model(seed: int, b: TransferBench) -> tuple:
    """A toy model fully trained on the labelled source domain of the benchmark."""
    src = generate_synthetic(SyntheticSpec(
        num_identities=b.source_ids, images_per_identity_per_camera=b.source_images_per_camera, num_cameras=2,
        cross_view_noise=b.noise, camera_shift=b.camera_shift, seed=1000 + seed, name="src"))
    model = build_model(num_classes=b.source_ids, verif_hidden=b.verif_hidden, seed=seed)
    two_stepped_finetune(model, src, TrainConfig(step1_iters=0, step2_iters=b.source_iters, seed=seed))
    return model, src


def target_split(seed: int, b: TransferBench, train_ids: int):
    """(target train set, test probe, test gallery) with disjoint identities."""
    tgt = generate_synthetic(SyntheticSpec(
        num_identities=train_ids + b.num_test_ids, images_per_identity_per_camera=b.target_images_per_camera,
        num_cameras=2, cross_view_noise=b.noise, camera_shift=b.camera_shift, seed=2000 + seed, name="tgt"))
    return _test_split(tgt, b.num_test_ids, seed)


def finetune_ablation(seed: int, b: TransferBench = TransferBench()) -> dict[str, float]:
    """Source-only, one-stepped and two-stepped fine-tuning rank-1 on one seed (same total budget)."""
    model, _ = source_model(seed, b)
    train, probe, gallery = target_split(seed, b, b.target_train_ids)
    out = {"source_only": evaluate(model, probe, gallery).rank1}
    ft = replace(b.finetune, seed=seed)
    for name, two in (("one_stepped", False), ("two_stepped", True)):
        m = copy.deepcopy(model)
        two_stepped_finetune(m, train, ft, two_stepped=two, seed_offset=1)
        out[name] = evaluate(m, probe, gallery).rank1
    log.info("fine-tune ablation seed %d: %s", seed, out)
    return out


@dataclass(frozen=True)
class CoTrainBench(TransferBench):
    target_train_ids: int = 60
    noise: float = 0.2
    camera_shift: float = 2.0
    rounds: int = 3
    lam: float = 0.03
    knn: int = 3
    finetune: TrainConfig = TrainConfig(step1_iters=100, step2_iters=100, initial_lr=0.001,
                                        head_init_scale=0.2, batch_k=8, batch_m=2)


def cotrain_ablation(seed: int, b: CoTrainBench = CoTrainBench()) -> dict[str, float]:
    """Source-only, subspace-only, self-training and co-training rank-1 on one unlabelled target."""
    model, _ = source_model(seed, b)
    train, probe, gallery = target_split(seed, b, b.target_train_ids)
    unlabelled = train.unlabelled()
    out = {"source_only": evaluate(model, probe, gallery).rank1}
    codes = subspace_codes(model, probe + gallery, b.lam, k=b.knn, seed=seed)
    n = len(probe)
    out["subspace"] = evaluate_features(codes.features[:n], probe, codes.features[n:], gallery).rank1
    ft = replace(b.finetune, seed=seed)
    m = copy.deepcopy(model)
    self_train(m, unlabelled, b.rounds, ft)
    out["self_training"] = evaluate(m, probe, gallery).rank1
    m = copy.deepcopy(model)
    history = []
    co_train(m, unlabelled, b.rounds, b.lam, None, b.knn, ft, seed=seed, history=history)
    out["co_training"] = evaluate(m, probe, gallery).rank1
    for rec in history[1:]:
        out[f"agreement_round{rec.round}"] = rec.agreement
    log.info("co-training ablation seed %d: %s", seed, out)
    return out


def summarise(rows: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
