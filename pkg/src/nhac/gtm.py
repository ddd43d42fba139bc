"""Per-tracklet graph trimming with a dynamic, tracklet-adaptive noise threshold."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from nhac.errors import InvalidConfigError, InvalidInputError


@dataclass
class TrackletGraph:
    node_features: np.ndarray  # (L, k)
    centroid: np.ndarray
    similarities: np.ndarray
    deviations: np.ndarray | None = None
    threshold: float | None = None
    survivor_mask: np.ndarray | None = None
    trimmed_feature: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.similarities)

    @property
    def n_trimmed(self) -> int:
        return 0 if self.survivor_mask is None else int((~self.survivor_mask).sum())


def build_graph(node_embeddings) -> TrackletGraph:
    F = np.asarray(node_embeddings, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise InvalidInputError("a tracklet graph needs at least one node")
    centroid = F.mean(axis=0)
    cn = np.linalg.norm(centroid)
    if cn == 0.0:
        warnings.warn("tracklet centroid is zero; cosine similarities set to 0", RuntimeWarning)
        sims = np.zeros(F.shape[0])
    else:
        sims = (F @ centroid) / (np.linalg.norm(F, axis=1) * cn)
    return TrackletGraph(F, centroid, sims)


def dynamic_threshold(deviations, delta: float) -> float:
    """Sum of squared deviations over ``L * delta``."""
    if not delta > 0:
        raise InvalidConfigError(f"delta must be positive, got {delta}")
    u = np.asarray(deviations, dtype=np.float64)
    if u.size == 0:
        raise InvalidInputError("threshold needs at least one deviation")
    return float(u.sum() / (u.size * delta))


def trim(graph: TrackletGraph, delta: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Mark nodes with ``(1 - s)^2 > q`` as noise; fills the graph and returns (mask, F')."""
    u = (1.0 - graph.similarities) ** 2
    q = dynamic_threshold(u, delta)
    mask = ~(u > q)
    graph.deviations = u
    graph.threshold = q
    graph.survivor_mask = mask
    if mask.all():
        graph.trimmed_feature = graph.centroid
    else:
        graph.trimmed_feature = graph.node_features[mask].mean(axis=0)
    return mask, graph.trimmed_feature


def trim_tracklet(node_embeddings, delta: float = 0.5) -> TrackletGraph:
    graph = build_graph(node_embeddings)
    trim(graph, delta)
    return graph


def trimmed_cluster_distance(cluster_a, cluster_b) -> float:
    """Minimum pairwise Euclidean distance between two sets of tracklet features."""
    A = np.atleast_2d(np.asarray(cluster_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(cluster_b, dtype=np.float64))
    if A.size == 0 or B.size == 0:
        raise InvalidInputError("cluster distance needs two non-empty clusters")
    return float(pairwise_distances(A, B).min())


def pairwise_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # explicit differences rather than the Gram expansion: exact for integer inputs
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
