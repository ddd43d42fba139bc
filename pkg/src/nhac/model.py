"""Frame embedding network, lookup-table classifier and the two training losses.

All gradients are computed by hand; the network is small enough that numpy
matrix products are the whole cost.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from nhac.errors import InvalidInputError, NonFiniteLossError

PARAM_ORDER = ("W1", "b1", "W2", "b2")


def normalize(v: np.ndarray) -> np.ndarray:
    """Return ``v / ||v||``; a zero vector maps to the first basis vector."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        warnings.warn("normalizing a degenerate vector; using first basis vector", RuntimeWarning)
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


def _normalize_rows(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    bad = norms == 0.0
    safe = np.where(bad, 1.0, norms)
    E = Z / safe[:, None]
    if bad.any():
        warnings.warn("embedding with zero norm; using first basis vector", RuntimeWarning)
        E[bad] = 0.0
        E[bad, 0] = 1.0
    return E, norms


class EmbeddingModel:
    """Two-layer perceptron: affine, ReLU, dropout, affine, L2 normalization."""

    def __init__(self, input_dim: int, hidden_dim: int = 64, embed_dim: int = 32,
                 dropout_rate: float = 0.5, seed: int = 0, init: str = "isometric"):
        if min(input_dim, hidden_dim, embed_dim) < 1:
            raise InvalidInputError("layer sizes must be positive")
        if not 0.0 <= dropout_rate < 1.0:
            raise InvalidInputError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.dropout_rate = dropout_rate
        rng = np.random.default_rng(seed)
        if init == "isometric":
            W1, W2 = _isometric_weights(input_dim, hidden_dim, embed_dim, rng)
        elif init == "random":
            W1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), (hidden_dim, input_dim))
            W2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), (embed_dim, hidden_dim))
        else:
            raise InvalidInputError(f"unknown init {init!r}")
        self.params = {"W1": W1, "b1": np.zeros(hidden_dim), "W2": W2, "b2": np.zeros(embed_dim)}

    def copy(self) -> "EmbeddingModel":
        other = object.__new__(EmbeddingModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def forward(self, X: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise InvalidInputError(
                f"expected frames of dimension {self.input_dim}, got shape {X.shape}")
        p = self.params
        a1 = X @ p["W1"].T + p["b1"]
        h = np.maximum(a1, 0.0)
        mask = None
        if train_mode and self.dropout_rate > 0.0:
            if rng is None:
                raise InvalidInputError("train_mode with dropout needs an rng")
            keep = 1.0 - self.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        z = h @ p["W2"].T + p["b2"]
        E, norms = _normalize_rows(z)
        cache = {"X": X, "a1": a1, "h": h, "mask": mask, "E": E, "norms": norms}
        return E, cache

    def backward(self, cache: dict, dE: np.ndarray) -> dict[str, np.ndarray]:
        E, norms = cache["E"], cache["norms"]
        safe = np.where(norms == 0.0, np.inf, norms)
        dz = (dE - E * np.einsum("ij,ij->i", E, dE)[:, None]) / safe[:, None]
        grads = {"W2": dz.T @ cache["h"], "b2": dz.sum(axis=0)}
        dh = dz @ self.params["W2"]
        if cache["mask"] is not None:
            dh = dh * cache["mask"]
        da1 = dh * (cache["a1"] > 0.0)
        grads["W1"] = da1.T @ cache["X"]
        grads["b1"] = da1.sum(axis=0)
        return grads

    def embed_frames(self, X: np.ndarray) -> np.ndarray:
        """Inference-mode embeddings of a frame matrix."""
        return self.forward(X, train_mode=False)[0]


def _orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def _isometric_weights(d: int, h: int, k: int, rng: np.random.Generator, jitter: float = 0.01):
    """Weights for which the untrained network is (close to) a random rotation of its input.

    The hidden layer holds ``relu(Ax)`` and ``relu(-Ax)`` so their difference recovers ``Ax``;
    this stands in for a pretrained backbone that already preserves input geometry.
    """
    half = h // 2
    A = _orthonormal(half, d, rng)
    C = _orthonormal(k, min(half, d), rng)
    B = C @ (A.T if half >= d else np.eye(half))
    W1 = np.zeros((h, d))
    W2 = np.zeros((k, h))
    W1[:half], W1[half:2 * half] = A, -A
    W2[:, :half], W2[:, half:2 * half] = B, -B
    W1 += jitter * rng.standard_normal(W1.shape) / np.sqrt(d)
    W2 += jitter * rng.standard_normal(W2.shape) / np.sqrt(h)
    return W1, W2


def embed(model: EmbeddingModel, frame: np.ndarray, train_mode: bool = False,
          rng: np.random.Generator | None = None) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1 or frame.shape[0] != model.input_dim:
        raise InvalidInputError(
            f"frame has length {frame.shape}, model expects {model.input_dim}")
    return model.forward(frame[None, :], train_mode=train_mode, rng=rng)[0][0]


def tracklet_feature(embeddings) -> np.ndarray:
    """Average pooling of frame embeddings (deliberately not re-normalized)."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise InvalidInputError("tracklet_feature needs a non-empty list of equal-length vectors")
    return E.mean(axis=0)


@dataclass
class LookupTable:
    """Cluster centroids stored as unit columns of an ``embed_dim x C`` matrix."""

    columns: np.ndarray
    tau: float = 0.1

    def __post_init__(self):
        self.columns = np.array(self.columns, dtype=np.float64)
        if self.columns.ndim != 2:
            raise InvalidInputError("lookup table columns must be a 2-D matrix")
        if self.tau <= 0:
            raise InvalidInputError(f"tau must be positive, got {self.tau}")
        for c in range(self.columns.shape[1]):
            self.columns[:, c] = normalize(self.columns[:, c])

    @classmethod
    def from_centroids(cls, centroids: np.ndarray, tau: float = 0.1) -> "LookupTable":
        """Build from a ``C x embed_dim`` matrix of (unnormalized) cluster means."""
        return cls(np.asarray(centroids, dtype=np.float64).T, tau)

    @property
    def n_clusters(self) -> int:
        return self.columns.shape[1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def cluster_probability(table: LookupTable, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (table.columns.shape[0],):
        raise InvalidInputError(f"feature of shape {v.shape} does not match table dim "
                                f"{table.columns.shape[0]}")
    return softmax(table.columns.T @ v / table.tau)


def id_loss(table: LookupTable, v: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Negative log cluster probability of label ``y`` (0-based) and its gradient w.r.t. ``v``."""
    if not 0 <= y < table.n_clusters:
        raise InvalidInputError(f"label {y} out of range for {table.n_clusters} clusters")
    p = cluster_probability(table, v)
    logits = table.columns.T @ v / table.tau
    # log-sum-exp form stays accurate when p[y] underflows
    m = logits.max()
    loss = float(m + np.log(np.exp(logits - m).sum()) - logits[y])
    d = p.copy()
    d[y] -= 1.0
    return max(loss, 0.0), table.columns @ d / table.tau


def update_lookup(table: LookupTable, y: int, v: np.ndarray) -> LookupTable:
    """Move column ``y`` to the midpoint with ``v`` and re-normalize, in place."""
    mid = 0.5 * (table.columns[:, y] + np.asarray(v, dtype=np.float64))
    n = np.linalg.norm(mid)
    if n == 0.0:
        warnings.warn(f"lookup column {y} update cancels out; keeping previous column",
                      RuntimeWarning)
        return table
    table.columns[:, y] = mid / n
    return table


def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray,
                 alpha: float = 0.3) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Hinge on Euclidean distances; returns the loss and (d_anchor, d_positive, d_negative)."""
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (anchor, positive, negative))
    dp_vec, dn_vec = a - p, a - n
    dp, dn = float(np.linalg.norm(dp_vec)), float(np.linalg.norm(dn_vec))
    loss = alpha + dp - dn
    zero = np.zeros_like(a)
    if loss <= 0.0:
        return 0.0, (zero, zero.copy(), zero.copy())
    gp = dp_vec / dp if dp > 0 else zero
    gn = dn_vec / dn if dn > 0 else zero
    return loss, (gp - gn, -gp, gn.copy())


@dataclass
class SgdOptimizer:
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_drop_epoch: int = 15
    lr_after: float = 0.01
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0 or self.lr_after < 0:
            raise InvalidInputError("learning rates must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError(f"momentum must be in [0, 1), got {self.momentum}")

    def rate_for_epoch(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch number."""
        return self.learning_rate if epoch <= self.lr_drop_epoch else self.lr_after

    def step(self, params: dict, grads: dict, epoch: int) -> None:
        lr = self.rate_for_epoch(epoch)
        for name in PARAM_ORDER:
            buf = self.velocity.get(name)
            if buf is None:
                buf = np.zeros_like(params[name])
            buf = self.momentum * buf + grads[name]
            self.velocity[name] = buf
            if lr != 0.0:
                params[name] -= lr * buf


@dataclass
class TrainSample:
    frames: np.ndarray  # (M, input_dim)
    label: int


def batch_loss_and_grads(model: EmbeddingModel, table: LookupTable, samples, triplets=(),
                         triplet_weight: float = 1.0, alpha: float = 0.3,
                         train_mode: bool = False, rng: np.random.Generator | None = None):
    """Mean id loss, mean triplet loss, parameter gradients and per-sample features.

    Triplets index into ``samples``: each part is ``(sample_index, part_index)`` and
    covers rows ``part_index * part_len`` to ``(part_index + 1) * part_len``.
    """
    if len(samples) == 0:
        raise InvalidInputError("empty training batch")
    sizes = [len(s.frames) for s in samples]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    X = np.concatenate([np.asarray(s.frames, dtype=np.float64) for s in samples])
    E, cache = model.forward(X, train_mode=train_mode, rng=rng)
    dE = np.zeros_like(E)
    nb = len(samples)

    feats = []
    id_total = 0.0
    for i, s in enumerate(samples):
        lo, hi = offsets[i], offsets[i + 1]
        v = E[lo:hi].mean(axis=0)
        loss, gv = id_loss(table, v, s.label)
        id_total += loss
        dE[lo:hi] += gv / (nb * (hi - lo))
        feats.append(v)

    trip_total = 0.0
    nt = len(triplets)
    if nt and triplet_weight != 0.0:
        for t in triplets:
            rows = []
            for (si, part) in (t.anchor, t.positive, t.negative):
                lo = offsets[si] + part * t.part_len
                rows.append((lo, lo + t.part_len))
            va, vp, vn = (E[lo:hi].mean(axis=0) for lo, hi in rows)
            loss, grads = triplet_loss(va, vp, vn, alpha)
            trip_total += loss
            if loss > 0.0:
                scale = triplet_weight / (nt * t.part_len)
                for (lo, hi), g in zip(rows, grads):
                    dE[lo:hi] += scale * g
    id_mean = id_total / nb
    trip_mean = trip_total / nt if nt else 0.0
    grads = model.backward(cache, dE)
    return id_mean, trip_mean, grads, feats


def train_step(model: EmbeddingModel, table: LookupTable, optimizer: SgdOptimizer, samples,
               triplets=(), epoch: int = 1, triplet_weight: float = 1.0, alpha: float = 0.3,
               rng: np.random.Generator | None = None, train_mode: bool = True):
    """One momentum-SGD update on a batch, followed by lookup-table column updates.

    Returns ``(id_loss, triplet_loss)`` averaged over the batch.
    """
    id_l, trip_l, grads, feats = batch_loss_and_grads(
        model, table, samples, triplets, triplet_weight, alpha, train_mode, rng)
    if not (np.isfinite(id_l) and np.isfinite(trip_l)):
        raise NonFiniteLossError(f"non-finite loss at epoch {epoch}: id={id_l} triplet={trip_l}")
    optimizer.step(model.params, grads, epoch)
    for s, v in zip(samples, feats):
        update_lookup(table, s.label, normalize(v))
    return id_l, trip_l
