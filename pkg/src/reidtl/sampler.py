"""Identity-balanced K x M minibatches with exhaustive, balanced ordered pair generation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from reidtl.data import Dataset, ImageRecord


class SamplingError(ValueError):
    pass


class DegenerateBatchWarning(UserWarning):
    """A batch with positives but no negatives, so there is nothing to balance against."""


@dataclass
class PairBatch:
    images: list[ImageRecord]
    positive_pairs: np.ndarray  # P x 2, ordered (i, j), i != j, same identity
    negative_pairs: np.ndarray  # Q x 2, ordered, different identity
    seed_state: dict | None = None

    @property
    def person_ids(self) -> np.ndarray:
        return np.array([r.person_id for r in self.images])

    @property
    def pairs(self) -> np.ndarray:
        """Positives then negatives, stacked."""
        return np.concatenate([self.positive_pairs, self.negative_pairs])

    @property
    def pair_targets(self) -> np.ndarray:
        """1 for same identity, 0 for different, aligned with ``pairs``."""
        return np.concatenate([
            np.ones(len(self.positive_pairs), dtype=np.int64),
            np.zeros(len(self.negative_pairs), dtype=np.int64),
        ])


def enumerate_pairs(labels) -> tuple[np.ndarray, np.ndarray]:
    """All ordered same-identity and cross-identity index pairs, row-major."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    pos = np.argwhere(same)
    neg = np.argwhere(diff)
    return pos.reshape(-1, 2), neg.reshape(-1, 2)


def generate_pairs(batch_images: list[ImageRecord], rng: np.random.Generator):
    """Exhaustive ordered pairs, with positives duplicated uniformly at random until balanced."""
    if len(batch_images) < 2:
        raise SamplingError("need at least two images to form pairs")
    labels = [r.person_id for r in batch_images]
    if any(lab is None for lab in labels):
        raise SamplingError("pair generation needs labelled images")
    pos, neg = enumerate_pairs(labels)
    if len(pos) == 0:
        raise SamplingError("batch has no same-identity pair")
    if len(neg) == 0:
        warnings.warn("batch holds a single identity: no negatives to balance against",
                      DegenerateBatchWarning, stacklevel=2)
        return pos, neg
    if len(neg) > len(pos):
        extra = rng.integers(len(pos), size=len(neg) - len(pos))
        pos = np.concatenate([pos, pos[extra]])
    return pos, neg


def sample_batch(ds: Dataset, K: int, M: int, rng: np.random.Generator) -> PairBatch:
    """Draw K identities, then M distinct images of each, and generate balanced pairs.

    Identities with fewer than M images are never drawn.
    """
    if M < 2:
        raise SamplingError(f"batch.m must be >= 2 for positive pairs, got {M}")
    if K < 1:
        raise SamplingError(f"batch.k must be >= 1, got {K}")
    groups = ds.by_identity()
    eligible = sorted(pid for pid, idx in groups.items() if len(idx) >= M)
    if len(eligible) < K:
        raise SamplingError(
            f"{ds.name}: only {len(eligible)} identities have >= {M} images, batch.k={K}"
        )
    state = rng.bit_generator.state
    chosen = rng.choice(len(eligible), size=K, replace=False)
    images = []
    for c in chosen:
        idx = groups[eligible[c]]
        for i in rng.choice(len(idx), size=M, replace=False):
            images.append(ds.records[idx[i]])
    pos, neg = generate_pairs(images, rng)
    return PairBatch(images, pos, neg, seed_state=state)


class BatchSampler:
    """Endless stream of PairBatch from one dataset; owns its RNG."""

    def __init__(self, ds: Dataset, K: int, M: int, seed: int = 0):
        self.ds = ds
        self.K = K
        self.M = M
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self) -> PairBatch:
        return sample_batch(self.ds, self.K, self.M, self.rng)
