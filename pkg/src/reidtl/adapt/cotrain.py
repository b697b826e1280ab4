"""Unsupervised transfer to an unlabelled target by soft-label self-training and co-training.

Soft labels give every anchor-view image its own pseudo class and attach each
image from the other views to its nearest anchor image. Co-training alternates
the deep model with the graph-regularised dictionary model: the dictionary
codes decide the nearest neighbours, the deep model is fine-tuned on them.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from reidtl.adapt.dictionary import DictModel, solve_graph_dictionary
from reidtl.data import Dataset
from reidtl.evaluation import FeatureMatrix, extract_features, pairwise_distances
from reidtl.train import TrainConfig, two_stepped_finetune

log = logging.getLogger(__name__)


class AdaptError(ValueError):
    pass


@dataclass
class SoftLabeling:
    labels: dict[str, int]
    anchor_view: int | None = None
    matched_view: int | tuple | None = None
    anchor_ids: tuple[str, ...] = ()

    @property
    def num_classes(self) -> int:
        return len(self.anchor_ids)

    def matches(self) -> dict[str, int]:
        """Non-anchor image id -> pseudo class."""
        anchors = set(self.anchor_ids)
        return {k: v for k, v in self.labels.items() if k not in anchors}


def _rows(features) -> tuple[np.ndarray, dict[str, int]]:
    if isinstance(features, FeatureMatrix):
        return features.features, {i: n for n, i in enumerate(features.image_ids)}
    raise TypeError("expected a FeatureMatrix")


def nearest_anchor(a_feat: np.ndarray, b_feat: np.ndarray) -> np.ndarray:
    """Index of the closest anchor row for every b row; ties go to the lower index."""
    if len(b_feat) == 0:
        return np.zeros(0, dtype=int)
    return np.argmin(pairwise_distances(b_feat, a_feat), axis=1)


def soft_labels_from_features(features: FeatureMatrix, view_a_ids, view_b_ids,
                              anchor_view=None, matched_view=None) -> SoftLabeling:
    """Pseudo class k for the k-th anchor image; each other image takes its nearest anchor's class."""
    view_a_ids = list(view_a_ids)
    view_b_ids = list(view_b_ids)
    if not view_a_ids:
        raise AdaptError("anchor view is empty")
    feats, row = _rows(features)
    a = feats[[row[i] for i in view_a_ids]]
    b = feats[[row[i] for i in view_b_ids]] if view_b_ids else np.zeros((0, feats.shape[1]))
    labels = {img: k for k, img in enumerate(view_a_ids)}
    for img, k in zip(view_b_ids, nearest_anchor(a, b)):
        labels[img] = int(k)
    return SoftLabeling(labels, anchor_view, matched_view, tuple(view_a_ids))


def split_views(target: Dataset, anchor_camera: int | None = None) -> tuple[int, list[str], list[str]]:
    """(anchor camera, anchor image ids, ids from every other camera)."""
    cams = sorted(target.cameras)
    if len(cams) < 2:
        raise AdaptError(f"{target.name}: need at least two camera views, found {cams}")
    anchor = cams[0] if anchor_camera is None else anchor_camera
    if anchor not in cams:
        raise AdaptError(f"{target.name}: anchor camera {anchor} not among {cams}")
    a = [r.image_id for r in target.records if r.camera_id == anchor]
    b = [r.image_id for r in target.records if r.camera_id != anchor]
    return anchor, a, b


def labeling_for(target: Dataset, features: FeatureMatrix, anchor_camera=None) -> SoftLabeling:
    anchor, a, b = split_views(target, anchor_camera)
    others = tuple(sorted(c for c in target.cameras if c != anchor))
    return soft_labels_from_features(features, a, b, anchor, others[0] if len(others) == 1 else others)


def build_cross_view_graph(features, views, k: int = 3) -> np.ndarray:
    """Binary k-nearest cross-view neighbour affinity, symmetrised by max.

    ``features`` is an n x D array or FeatureMatrix and ``views`` the camera id
    of each row. Same-view pairs and the diagonal are always zero.
    """
    X = features.features if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    views = np.asarray(views)
    if k < 1:
        raise AdaptError(f"k must be >= 1, got {k}")
    if len(np.unique(views)) < 2:
        raise AdaptError("cross-view graph needs at least two views")
    n = len(X)
    dist = pairwise_distances(X, X)
    W = np.zeros((n, n))
    for i in range(n):
        cand = np.flatnonzero(views != views[i])
        if len(cand) < k:
            raise AdaptError(f"k={k} exceeds the {len(cand)} images outside view {views[i]}")
        order = cand[np.argsort(dist[i, cand], kind="stable")[:k]]
        W[i, order] = 1.0
    return np.maximum(W, W.T)


def relabel(target: Dataset, labeling: SoftLabeling) -> Dataset:
    missing = [r.image_id for r in target.records if r.image_id not in labeling.labels]
    if missing:
        raise AdaptError(f"soft labeling does not cover {len(missing)} target images, e.g. {missing[0]}")
    recs = [dataclasses.replace(r, person_id=labeling.labels[r.image_id]) for r in target.records]
    return Dataset(recs, name=f"{target.name}-pseudo", image_size=target.image_size)


def self_train_round(model, target: Dataset, labeling: SoftLabeling, cfg: TrainConfig,
                     seed_offset: int = 0, history: list | None = None):
    """Two-stepped fine-tuning with pseudo classes standing in for identities.

    Every anchor image carries its own class, so the new head is M_a wide.
    """
    if labeling.num_classes < 2:
        raise AdaptError(f"need at least 2 pseudo classes, got {labeling.num_classes}")
    pseudo = relabel(target, labeling)
    two_stepped_finetune(model, pseudo, cfg, history, seed_offset=seed_offset)
    return model


def label_agreement(prev: SoftLabeling, cur: SoftLabeling) -> float:
    """Fraction of non-anchor images whose matched anchor image is unchanged."""
    a, b = prev.matches(), cur.matches()
    keys = sorted(set(a) & set(b))
    if not keys:
        return 1.0
    pa = {k: prev.anchor_ids[v] for k, v in a.items()}
    pb = {k: cur.anchor_ids[v] for k, v in b.items()}
    return float(np.mean([pa[k] == pb[k] for k in keys]))


@dataclass
class RoundRecord:
    round: int
    labeling: SoftLabeling
    agreement: float | None
    dict_model: DictModel | None = None


def target_matrix(model, target: Dataset) -> FeatureMatrix:
    return extract_features(model, target.records)


def subspace_labeling(model, target: Dataset, lam: float, k_atoms: int | None, k: int,
                      anchor_camera=None, seed: int = 0, solver_iters: int = 100):
    """Steps 1-4 of a co-training round: features, graph, dictionary, code-space soft labels."""
    fm = target_matrix(model, target)
    views = np.array([r.camera_id for r in target.records])
    W = build_cross_view_graph(fm, views, k)
    dm = solve_graph_dictionary(fm.features.T, W, lam, k_atoms, iters=solver_iters, seed=seed)
    codes = FeatureMatrix(dm.Z.T, fm.image_ids, "dictionary-codes")
    return labeling_for(target, codes, anchor_camera), dm


def co_train(model, target: Dataset, rounds: int = 3, lam: float = 1.0, k_atoms: int | None = None,
             k: int = 3, cfg: TrainConfig | None = None, anchor_camera=None, seed: int = 0,
             history: list | None = None, solver_iters: int = 100):
    """Alternate the dictionary model (labels from code distances) and soft-label self-training.

    Each round replaces the previous labels wholesale. ``history`` receives one
    RoundRecord per round with the label agreement against the previous round.
    """
    if rounds < 1:
        raise AdaptError(f"adapt.rounds must be >= 1, got {rounds}")
    cfg = cfg or TrainConfig()
    prev = None
    for r in range(rounds):
        labeling, dm = subspace_labeling(model, target, lam, k_atoms, k, anchor_camera, seed + r, solver_iters)
        agree = label_agreement(prev, labeling) if prev is not None else None
        log.info("co-train round %d: %d pseudo classes, agreement %s", r, labeling.num_classes, agree)
        self_train_round(model, target, labeling, dataclasses.replace(cfg, seed=cfg.seed + r), seed_offset=r)
        if history is not None:
            history.append(RoundRecord(r, labeling, agree, dm))
        prev = labeling
    return model


def self_train(model, target: Dataset, rounds: int = 3, cfg: TrainConfig | None = None,
               anchor_camera=None, history: list | None = None):
    """Self-training alone: labels from deep-feature nearest neighbours each round."""
    cfg = cfg or TrainConfig()
    prev = None
    for r in range(rounds):
        labeling = labeling_for(target, target_matrix(model, target), anchor_camera)
        agree = label_agreement(prev, labeling) if prev is not None else None
        self_train_round(model, target, labeling, dataclasses.replace(cfg, seed=cfg.seed + r), seed_offset=r)
        if history is not None:
            history.append(RoundRecord(r, labeling, agree))
        prev = labeling
    return model


def mutual_nn_rate(features: FeatureMatrix, views, anchor_camera=None) -> float:
    """Share of anchor-view images whose cross-view nearest neighbour points back at them."""
    views = np.asarray(views)
    cams = sorted(set(views.tolist()))
    anchor = cams[0] if anchor_camera is None else anchor_camera
    a_idx = np.flatnonzero(views == anchor)
    b_idx = np.flatnonzero(views != anchor)
    if len(a_idx) == 0 or len(b_idx) == 0:
        raise AdaptError("mutual nearest-neighbour rate needs both views")
    X = features.features
    d = pairwise_distances(X[a_idx], X[b_idx])
    ab = np.argmin(d, axis=1)
    ba = np.argmin(d, axis=0)
    return float(np.mean(ba[ab] == np.arange(len(a_idx))))


def halve(target: Dataset, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random half split, stratified by camera."""
    rng = np.random.default_rng(seed)
    first, second = [], []
    for cam in sorted(target.cameras):
        recs = [r for r in target.records if r.camera_id == cam]
        perm = rng.permutation(len(recs))
        cut = len(recs) // 2
        first.extend(recs[i] for i in sorted(perm[:cut]))
        second.extend(recs[i] for i in sorted(perm[cut:]))
    return (Dataset(first, f"{target.name}-a", target.image_size),
            Dataset(second, f"{target.name}-b", target.image_size))


def select_lambda(model, target: Dataset, candidates, seed: int = 0, k_atoms: int | None = None,
                  k: int = 3, cfg: TrainConfig | None = None, anchor_camera=None) -> float:
    """Pick lambda by one co-training round on one half and the mutual-NN rate on the other.

    Ties go to the smaller lambda.
    """
    candidates = sorted(float(c) for c in candidates)
    if not candidates:
        raise AdaptError("no lambda candidates")
    if len(candidates) == 1:
        return candidates[0]
    fit_half, val_half = halve(target, seed)
    views = [r.camera_id for r in val_half.records]
    best, best_score = None, -np.inf
    for lam in candidates:
        trial = copy.deepcopy(model)
        co_train(trial, fit_half, 1, lam, k_atoms, k, cfg, anchor_camera, seed)
        score = mutual_nn_rate(target_matrix(trial, val_half), views, anchor_camera)
        log.info("lambda %g: mutual-NN rate %.4f", lam, score)
        if score > best_score:
            best, best_score = lam, score
    return best


def subspace_codes(model, records, lam: float = 1.0, k_atoms: int | None = None, k: int = 3,
                   seed: int = 0, solver_iters: int = 100) -> FeatureMatrix:
    """The dictionary model on its own: codes of ``records`` learned transductively from deep features.

    Used as the subspace-only baseline, where the deep model stays fixed and
    matching happens between code columns.
    """
    records = list(records)
    fm = extract_features(model, records)
    views = np.array([r.camera_id for r in records])
    W = build_cross_view_graph(fm, views, k)
    dm = solve_graph_dictionary(fm.features.T, W, lam, k_atoms, iters=solver_iters, seed=seed)
    return FeatureMatrix(dm.Z.T, fm.image_ids, "dictionary-codes")
