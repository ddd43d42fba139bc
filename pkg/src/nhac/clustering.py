"""Bottom-up single-linkage cluster state with a fixed per-iteration merge budget."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from nhac.errors import InvalidConfigError, InvalidInputError
from nhac.gtm import pairwise_distances
from nhac.model import LookupTable, normalize


@dataclass(frozen=True)
class MergeRecord:
    iteration: int
    a: int
    b: int
    distance: float


@dataclass
class ClusterState:
    """``assignment[i]`` is the cluster id of tracklet ``i``.

    Cluster ids are tracklet indices: a merged cluster keeps the smaller id.
    """

    assignment: np.ndarray
    merge_log: list[MergeRecord] = field(default_factory=list)
    iteration: int = 0
    distances: np.ndarray | None = None  # live-cluster single-linkage matrix after the last merge_step

    @property
    def n_tracklets(self) -> int:
        return len(self.assignment)

    @property
    def cluster_count(self) -> int:
        return len(np.unique(self.assignment))

    def live_clusters(self) -> np.ndarray:
        return np.unique(self.assignment)


def init_clusters(n: int) -> ClusterState:
    if n < 1:
        raise InvalidInputError(f"need at least one tracklet, got {n}")
    return ClusterState(np.arange(n))


def merge_budget(n: int, mp: float) -> int:
    if not 0.0 < mp < 1.0:
        raise InvalidConfigError(f"mp must be in (0, 1), got {mp}")
    return max(1, math.floor(n * mp + 1e-9))


def cluster_distance_matrix(assignment: np.ndarray, tracklet_dist: np.ndarray):
    """Single-linkage distances between live clusters (ordered by id)."""
    ids = np.unique(assignment)
    order = np.argsort(assignment, kind="stable")
    starts = np.searchsorted(assignment[order], ids)
    D = tracklet_dist[np.ix_(order, order)]
    D = np.minimum.reduceat(D, starts, axis=0)
    D = np.minimum.reduceat(D, starts, axis=1)
    np.fill_diagonal(D, 0.0)
    return ids, D


def merge_step(state: ClusterState, features, mp: float = 0.05,
               budget_base: int | None = None) -> ClusterState:
    """Perform ``max(1, floor(N * mp))`` nearest-pair merges in place.

    Distances are single linkage over Euclidean distances between tracklet features;
    after each merge the row of the kept cluster becomes the elementwise minimum of the
    two merged rows. Ties go to the lexicographically smallest (id, id) pair.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] != state.n_tracklets:
        raise InvalidInputError(
            f"{feats.shape[0]} features for {state.n_tracklets} tracklets")
    state.iteration += 1
    ids, D = cluster_distance_matrix(state.assignment, pairwise_distances(feats, feats))
    if len(ids) < 2:
        warnings.warn("only one cluster left; nothing to merge", RuntimeWarning)
        state.distances = D
        return state
    m = merge_budget(state.n_tracklets if budget_base is None else budget_base, mp)

    work = D.copy()
    np.fill_diagonal(work, np.inf)
    alive = np.ones(len(ids), dtype=bool)
    for _ in range(min(m, len(ids) - 1)):
        # first row-major minimum of a symmetric matrix lies above the diagonal
        flat = int(np.argmin(work))
        i, j = divmod(flat, len(ids))
        dist = float(work[i, j])
        a, b = int(ids[i]), int(ids[j])
        state.merge_log.append(MergeRecord(state.iteration, a, b, dist))
        state.assignment[state.assignment == b] = a
        merged = np.minimum(work[i], work[j])
        work[i, :] = merged
        work[:, i] = merged
        work[i, i] = np.inf
        work[j, :] = np.inf
        work[:, j] = np.inf
        alive[j] = False

    keep = np.flatnonzero(alive)
    state.distances = np.where(np.isinf(work), 0.0, work)[np.ix_(keep, keep)]
    return state


def assign_pseudo_labels(state: ClusterState) -> np.ndarray:
    """Dense 0-based labels, ordered by cluster id."""
    return np.unique(state.assignment, return_inverse=True)[1]


def rebuild_lookup(state: ClusterState, features, tau: float = 0.1) -> LookupTable:
    feats = np.asarray(features, dtype=np.float64)
    labels = assign_pseudo_labels(state)
    C = labels.max() + 1
    sums = np.zeros((C, feats.shape[1]))
    np.add.at(sums, labels, feats)
    counts = np.bincount(labels, minlength=C)
    cols = np.stack([normalize(sums[c] / counts[c]) for c in range(C)], axis=1)
    return LookupTable(cols, tau)
