"""Single-image-representation retrieval: Euclidean ranking, CMC and mAP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from reidtl.data import Dataset, ImageRecord, query_groups

RANKS = (1, 5, 10, 20)
PROTOCOL_NAMES = {"single_shot": "single_shot", "single_query": "SQ", "multi_query": "MQ",
                  "SQ": "SQ", "MQ": "MQ"}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["cmc", "rank_table", "map", "protocol"],
    "properties": {
        "cmc": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "rank_table": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False,
        },
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "protocol": {"enum": ["SQ", "MQ", "single_shot"]},
        "num_probes": {"type": "integer", "minimum": 0},
        "num_excluded": {"type": "integer", "minimum": 0},
    },
}


class EvaluationError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    features: np.ndarray  # n x D
    image_ids: list[str]
    extractor_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or len(self.features) != len(self.image_ids):
            raise EvaluationError(f"feature matrix of shape {self.features.shape} does not align "
                                  f"with {len(self.image_ids)} image ids")
        if not np.all(np.isfinite(self.features)):
            raise EvaluationError("feature matrix contains NaN or Inf")

    def __len__(self):
        return len(self.image_ids)


def _as_tensor(images, dtype) -> torch.Tensor:
    arr = np.stack([r.pixels for r in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def extract_features(model, images, batch_size: int = 512) -> FeatureMatrix:
    """Run ``model.embed`` (no dropout) over ``images``; rows follow input order."""
    if isinstance(images, Dataset):
        images = images.records
    images = list(images)
    ident = getattr(model, "extractor_id", "") or type(model).__name__
    dim = getattr(model, "feature_dim", 0)
    if not images:
        return FeatureMatrix(np.zeros((0, dim), dtype=np.float64), [], ident)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            chunks.append(model.embed(_as_tensor(images[s:s + batch_size], dtype)).double().numpy())
    model.train(was_training)
    return FeatureMatrix(np.concatenate(chunks), [r.image_id for r in images], ident)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``a`` and rows of ``b``, by explicit differences."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise EvaluationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((len(a), len(b)))
    step = max(1, 2_000_000 // max(1, len(b) * a.shape[1]))
    for s in range(0, len(a), step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def rank_gallery(probe_feat, gallery) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance; ties keep the lower index first."""
    g = gallery.features if isinstance(gallery, FeatureMatrix) else np.asarray(gallery)
    probe_feat = np.asarray(probe_feat, dtype=np.float64).ravel()
    if g.ndim != 2 or probe_feat.shape[0] != g.shape[1]:
        raise EvaluationError(f"probe has {probe_feat.shape[0]} dims, gallery rows have "
                              f"{g.shape[1] if g.ndim == 2 else '?'}")
    d = pairwise_distances(probe_feat[None], g)[0]
    return np.argsort(d, kind="stable")


def compute_cmc(rankings, probe_ids, gallery_ids, gallery_size: int | None = None) -> np.ndarray:
    """cmc[k-1] = fraction of probes whose first correct match is at rank <= k.

    Probes whose identity is absent from their ranking are skipped; the
    denominator counts only the probes that have a correct match.
    """
    gallery_ids = np.asarray(gallery_ids)
    if len(probe_ids) == 0:
        raise EvaluationError("empty probe set")
    size = gallery_size or len(gallery_ids)
    cmc = np.zeros(size)
    valid = 0
    for ranking, pid in zip(rankings, probe_ids):
        hits = np.flatnonzero(gallery_ids[np.asarray(ranking, dtype=int)] == pid)
        if len(hits) == 0:
            continue
        valid += 1
        cmc[hits[0]:] += 1
    if valid == 0:
        raise EvaluationError("no probe identity appears in the gallery")
    return cmc / valid


def average_precision(ranking, pid, gallery_ids) -> float:
    matches = np.asarray(gallery_ids)[np.asarray(ranking, dtype=int)] == pid
    hit_ranks = np.flatnonzero(matches) + 1
    if len(hit_ranks) == 0:
        raise EvaluationError(f"probe identity {pid} has no correct gallery match")
    return float(np.mean(np.arange(1, len(hit_ranks) + 1) / hit_ranks))


def compute_map(rankings, probe_ids, gallery_ids, protocol: str = "SQ") -> float:
    """Mean over probes (or MQ query groups) of average precision over every correct gallery item."""
    if PROTOCOL_NAMES.get(protocol) is None:
        raise EvaluationError(f"unknown protocol {protocol!r}")
    if len(probe_ids) == 0:
        raise EvaluationError("empty probe set")
    return float(np.mean([average_precision(r, p, gallery_ids) for r, p in zip(rankings, probe_ids)]))


@dataclass
class EvalReport:
    cmc: np.ndarray
    rank_table: dict[int, float]
    map: float
    protocol: str
    num_probes: int = 0
    num_excluded: int = 0

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        return {
            "cmc": [float(v) for v in self.cmc],
            "rank_table": {str(k): float(v) for k, v in self.rank_table.items()},
            "map": float(self.map),
            "protocol": self.protocol,
            "num_probes": int(self.num_probes),
            "num_excluded": int(self.num_excluded),
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def rank_table(cmc: np.ndarray, ranks=RANKS) -> dict[int, float]:
    return {k: float(cmc[min(k, len(cmc)) - 1]) for k in ranks}


def evaluate_features(probe_feat: np.ndarray, probe: list[ImageRecord], gallery_feat: np.ndarray,
                      gallery: list[ImageRecord], protocol: str = "single_shot") -> EvalReport:
    """Rank, drop same-identity same-camera gallery entries, then score CMC and mAP.

    Under multi-query the features of each (identity, camera) query group are
    averaged into one query before ranking.
    """
    name = PROTOCOL_NAMES.get(protocol)
    if name is None:
        raise EvaluationError(f"unknown protocol {protocol!r}")
    if not probe:
        raise EvaluationError("empty probe set")
    probe_feat = np.asarray(probe_feat, dtype=np.float64)
    gallery_feat = np.asarray(gallery_feat, dtype=np.float64)
    g_ids = np.array([r.person_id for r in gallery])
    g_cams = np.array([r.camera_id for r in gallery])
    if name == "MQ":
        groups = query_groups(probe)
        q_feat = np.stack([probe_feat[g].mean(axis=0) for g in groups])
        q_ids = [probe[g[0]].person_id for g in groups]
        q_cams = [probe[g[0]].camera_id for g in groups]
    else:
        q_feat = probe_feat
        q_ids = [r.person_id for r in probe]
        q_cams = [r.camera_id for r in probe]
    dist = pairwise_distances(q_feat, gallery_feat)
    rankings, kept_ids, excluded = [], [], 0
    for d, pid, cam in zip(dist, q_ids, q_cams):
        order = np.argsort(d, kind="stable")
        order = order[~((g_ids[order] == pid) & (g_cams[order] == cam))]
        if not np.any(g_ids[order] == pid):
            excluded += 1
            continue
        rankings.append(order)
        kept_ids.append(pid)
    if not rankings:
        raise EvaluationError("no probe has a cross-camera match in the gallery")
    cmc = compute_cmc(rankings, kept_ids, g_ids, gallery_size=len(gallery))
    mean_ap = compute_map(rankings, kept_ids, g_ids, name)
    return EvalReport(cmc, rank_table(cmc), mean_ap, name, len(kept_ids), excluded)


def evaluate(model, probe: list[ImageRecord], gallery: list[ImageRecord],
             protocol: str = "single_shot") -> EvalReport:
    pf = extract_features(model, probe).features
    gf = extract_features(model, gallery).features
    return evaluate_features(pf, probe, gf, gallery, protocol)


def write_features(fm: FeatureMatrix, path) -> tuple[Path, Path]:
    """Row-major float32 binary plus a sidecar CSV of image ids (``<path>.ids.csv``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fm.features.astype("<f4").tofile(path)
    ids = path.with_name(path.name + ".ids.csv")
    with open(ids, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id"])
        w.writerows([i] for i in fm.image_ids)
    return path, ids


def read_features(path) -> FeatureMatrix:
    path = Path(path)
    ids_path = path.with_name(path.name + ".ids.csv")
    with open(ids_path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    ids = [r[0] for r in rows]
    flat = np.fromfile(path, dtype="<f4")
    if ids and flat.size % len(ids):
        raise EvaluationError(f"{path}: {flat.size} floats do not divide into {len(ids)} rows")
    dim = flat.size // len(ids) if ids else 0
    return FeatureMatrix(flat.reshape(len(ids), dim).astype(np.float64), ids)
