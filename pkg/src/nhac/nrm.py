"""Node re-sampling: easy/hard node split, re-balanced training sets and tracklet triplets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from nhac.errors import InvalidConfigError, InvalidInputError

CRITERIA = ("over", "under", "over_under")


@dataclass
class NodeSplit:
    easy: np.ndarray
    hard: np.ndarray
    mean_similarity: float


@dataclass
class ResampledSet:
    indices: np.ndarray
    criterion: str

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class Triplet:
    """Each part is ``(sample_index, part_index)`` into the training batch."""

    anchor: tuple[int, int]
    positive: tuple[int, int]
    negative: tuple[int, int]
    part_len: int


def split_nodes(similarities, node_ids=None) -> NodeSplit:
    """Nodes at or above the mean similarity are easy, the rest hard.

    ``node_ids`` maps positions to frame indices (e.g. GTM survivors).
    """
    s = np.asarray(similarities, dtype=np.float64)
    if s.size == 0:
        raise InvalidInputError("split_nodes needs at least one node")
    ids = np.arange(s.size) if node_ids is None else np.asarray(node_ids)
    mean = float(s.mean())
    easy = s >= mean
    return NodeSplit(ids[easy], ids[~easy], mean)


def _oversampled_hard(split: NodeSplit, rng: np.random.Generator) -> np.ndarray:
    g, b = split.easy, split.hard
    if len(g) > len(b) > 0:
        extra = rng.choice(b, size=len(g) - len(b), replace=True)
        return np.concatenate([b, extra])
    return b


def _undersampled_easy(split: NodeSplit, rng: np.random.Generator) -> np.ndarray:
    n = min(len(split.hard), len(split.easy))
    return rng.choice(split.easy, size=n, replace=False)


def oversample(split: NodeSplit, rng: np.random.Generator) -> ResampledSet:
    return ResampledSet(np.concatenate([split.easy, _oversampled_hard(split, rng)]), "over")


def undersample(split: NodeSplit, rng: np.random.Generator) -> ResampledSet:
    if len(split.hard) == 0:
        return ResampledSet(split.easy.copy(), "under")
    return ResampledSet(np.concatenate([_undersampled_easy(split, rng), split.hard]), "under")


def over_under_union(split: NodeSplit, rng: np.random.Generator) -> ResampledSet:
    if len(split.hard) == 0:
        return ResampledSet(split.easy.copy(), "over_under")
    b_star = _oversampled_hard(split, rng)
    g_star = _undersampled_easy(split, rng)
    return ResampledSet(np.concatenate([b_star, g_star]), "over_under")


def resample(split: NodeSplit, criterion: str, rng: np.random.Generator) -> ResampledSet:
    if criterion == "over":
        return oversample(split, rng)
    if criterion == "under":
        return undersample(split, rng)
    if criterion == "over_under":
        return over_under_union(split, rng)
    raise InvalidConfigError(f"unknown resampling criterion {criterion!r}; expected one of {CRITERIA}")


def sample_training_frames(indices, M: int, rng: np.random.Generator) -> np.ndarray:
    """``M`` uniform draws from a (multi)set; with replacement only when it is too small."""
    pool = np.asarray(getattr(indices, "indices", indices))
    if pool.size == 0:
        raise InvalidInputError("cannot sample frames from an empty set")
    return rng.choice(pool, size=M, replace=pool.size < M)


def build_triplets(labels, K: int, M: int, rng: np.random.Generator) -> list[Triplet]:
    """One (anchor, positive, negative) triple per batch member.

    Anchor and positive are two distinct parts of the member's ``M`` sampled frames;
    the negative is a random part of a batch member with a different pseudo label.
    """
    if K < 1 or M % K != 0:
        raise InvalidConfigError(f"M={M} must be divisible by K={K}")
    labels = np.asarray(labels)
    if K < 2:
        warnings.warn("K < 2 leaves no positive part; skipping triplet loss", RuntimeWarning)
        return []
    if len(np.unique(labels)) < 2:
        warnings.warn("batch has a single pseudo label; skipping triplet loss", RuntimeWarning)
        return []
    part_len = M // K
    out = []
    for i, y in enumerate(labels):
        a, p = rng.choice(K, size=2, replace=False)
        others = np.flatnonzero(labels != y)
        j = int(rng.choice(others))
        n = int(rng.integers(K))
        out.append(Triplet((i, int(a)), (i, int(p)), (j, n), part_len))
    return out
