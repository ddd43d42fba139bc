"""Retrieval (CMC, mAP), clustering and trimming quality metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class RankingResult:
    order: np.ndarray    # (Q, G) gallery indices, nearest first, ties by gallery index
    matches: np.ndarray  # (Q, G) bool, match flags in ranked order
    valid: np.ndarray    # (Q,) queries with at least one gallery match


def rank_gallery(distances, query_ids, gallery_ids) -> RankingResult:
    D = np.asarray(distances, dtype=np.float64)
    q = np.asarray(query_ids)
    g = np.asarray(gallery_ids)
    if D.shape != (len(q), len(g)):
        raise ValueError(f"distance matrix {D.shape} does not match {len(q)} x {len(g)} ids")
    order = np.argsort(D, axis=1, kind="stable")
    matches = g[order] == q[:, None]
    valid = matches.any(axis=1)
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} queries have no gallery match; excluded",
                      RuntimeWarning)
    return RankingResult(order, matches, valid)


def cmc_rank(distances, query_ids, gallery_ids, k: int = 1) -> float:
    r = rank_gallery(distances, query_ids, gallery_ids)
    m = r.matches[r.valid]
    if m.shape[0] == 0:
        return float("nan")
    return float(m[:, :k].any(axis=1).mean())


def cmc_curve(distances, query_ids, gallery_ids, ks=(1, 5, 10)) -> dict[int, float]:
    r = rank_gallery(distances, query_ids, gallery_ids)
    m = r.matches[r.valid]
    return {k: float(m[:, :k].any(axis=1).mean()) if len(m) else float("nan") for k in ks}


def average_precision(match_flags) -> float:
    """Mean of precision@rank over the ranks that hold a correct match."""
    hits = np.asarray(match_flags, dtype=bool)
    ranks = np.flatnonzero(hits) + 1
    if ranks.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_ap(distances, query_ids, gallery_ids) -> float:
    r = rank_gallery(distances, query_ids, gallery_ids)
    aps = [average_precision(row) for row in r.matches[r.valid]]
    return float(np.mean(aps)) if aps else float("nan")


def _same_pairs(labels) -> np.ndarray:
    lab = np.asarray(labels)
    same = lab[:, None] == lab[None, :]
    return same[np.triu_indices(len(lab), k=1)]


def _ratio(num: int, den: int) -> float:
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return num / den


def pairwise_f1(pseudo_labels, true_identities) -> tuple[float, float, float]:
    """Pair-counting precision, recall and F1 of a clustering against identities."""
    if len(pseudo_labels) != len(true_identities):
        raise ValueError("label arrays differ in length")
    pred = _same_pairs(pseudo_labels)
    true = _same_pairs(true_identities)
    tp = int((pred & true).sum())
    precision = _ratio(tp, int(pred.sum()))
    recall = _ratio(tp, int(true.sum()))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def trim_quality(survivor_masks, true_kinds) -> tuple[float, float] | None:
    """Precision and recall of trimmed nodes as noise detections; None without ground truth."""
    if true_kinds is None or any(k is None for k in true_kinds):
        return None
    trimmed = np.concatenate([~np.asarray(m, dtype=bool) for m in survivor_masks])
    noise = np.concatenate([np.asarray(k) == "noise" for k in true_kinds])
    tp = int((trimmed & noise).sum())
    return _ratio(tp, int(trimmed.sum())), _ratio(tp, int(noise.sum()))


def node_percentages(splits, survivor_masks) -> tuple[float, float]:
    """Dataset-level (hard %, noise %) from node splits and trimming masks."""
    total = sum(len(m) for m in survivor_masks)
    if total == 0:
        return 0.0, 0.0
    hard = sum(len(s.hard) for s in splits) if splits is not None else 0
    noise = sum(int((~np.asarray(m, dtype=bool)).sum()) for m in survivor_masks)
    return 100.0 * hard / total, 100.0 * noise / total
