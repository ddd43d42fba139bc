"""Synthetic tracklets with planted easy/hard/noise frames, plus text persistence.

Dataset file (UTF-8, one frame per line)::

    #nhac-dataset v1 dim=<d> fields=tracklet,identity,camera,kind,feature
    <tracklet_id>\t<identity|->\t<camera|->\t<kind|->\t<f_1>\t...\t<f_d>

Frames of one tracklet are consecutive and in temporal order.
"""

from __future__ import annotations

import math
import os
import re
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from nhac.errors import InvalidConfigError, InvalidInputError

KINDS = ("easy", "hard", "noise")
NOISE_MODES = ("other_identity", "uniform_random")
DATASET_HEADER = "#nhac-dataset v1 dim={dim} fields=tracklet,identity,camera,kind,feature"
MODEL_HEADER = "#nhac-model v1"


@dataclass
class SyntheticSpec:
    n_identities: int = 10
    n_cameras: int = 2
    tracklets_per_identity_per_camera: int = 2
    min_frames: int = 16
    max_frames: int = 32
    input_dim: int = 32
    easy_sigma: float = 0.3
    hard_sigma: float = 0.6
    tracklet_sigma: float = 0.8   # per-tracklet drift (viewpoint, lighting)
    camera_sigma: float = 0.8     # shared per-camera offset
    nuisance_dim: int = 2         # drift lives in this many fixed directions; 0 = anywhere
    hard_drift_share: float = 0.0  # how much of the drift hard frames keep
    hard_fraction: float = 0.3
    noise_fraction: float = 0.1
    noise_mode: str = "other_identity"
    min_angle_deg: float = 60.0
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        from nhac.configio import from_mapping

        spec = from_mapping(cls, data)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.n_identities < 1 or self.n_cameras < 1 or self.tracklets_per_identity_per_camera < 1:
            raise InvalidConfigError("identity, camera and tracklet counts must be positive")
        if not 1 <= self.min_frames <= self.max_frames:
            raise InvalidConfigError(f"bad frame range [{self.min_frames}, {self.max_frames}]")
        if self.input_dim < 2:
            raise InvalidConfigError("input_dim must be at least 2")
        if not 0 <= self.hard_drift_share <= 1:
            raise InvalidConfigError("hard_drift_share must lie in [0, 1]")
        if not 0 <= self.nuisance_dim <= self.input_dim:
            raise InvalidConfigError("nuisance_dim must lie in [0, input_dim]")
        if not (0 <= self.hard_fraction < 1 and 0 <= self.noise_fraction < 1
                and self.hard_fraction + self.noise_fraction < 1):
            raise InvalidConfigError("need hard_fraction + noise_fraction < 1, each in [0, 1)")
        if min(self.easy_sigma, self.hard_sigma, self.tracklet_sigma, self.camera_sigma) < 0:
            raise InvalidConfigError("perturbation scales must be non-negative")
        if self.hard_sigma < self.easy_sigma:
            raise InvalidConfigError("hard_sigma must not be smaller than easy_sigma")
        if self.noise_mode not in NOISE_MODES:
            raise InvalidConfigError(f"noise_mode must be one of {NOISE_MODES}")
        if self.noise_mode == "other_identity" and self.noise_fraction > 0 and self.n_identities < 2:
            raise InvalidConfigError("other_identity noise needs at least two identities")


@dataclass
class Tracklet:
    tracklet_id: str
    features: np.ndarray  # (L, d)
    identity: str | None = None
    camera: str | None = None
    kinds: list[str] | None = None

    def __len__(self):
        return len(self.features)


@dataclass
class Dataset:
    tracklets: list[Tracklet]
    dim: int
    prototypes: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.tracklets)

    @property
    def has_identity(self) -> bool:
        return all(t.identity is not None for t in self.tracklets)

    @property
    def has_camera(self) -> bool:
        return all(t.camera is not None for t in self.tracklets)

    @property
    def has_kinds(self) -> bool:
        return all(t.kinds is not None for t in self.tracklets)

    def identities(self) -> list[str | None]:
        return [t.identity for t in self.tracklets]


def kind_counts(n_frames: int, hard_fraction: float, noise_fraction: float) -> tuple[int, int, int]:
    """(easy, hard, noise) counts, rounding half up."""
    n_noise = math.floor(n_frames * noise_fraction + 0.5)
    n_hard = min(math.floor(n_frames * hard_fraction + 0.5), n_frames - n_noise)
    return n_frames - n_hard - n_noise, n_hard, n_noise


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _prototypes(spec: SyntheticSpec, rng: np.random.Generator, max_attempts: int = 10000):
    min_cos = math.cos(math.radians(spec.min_angle_deg))
    protos: list[np.ndarray] = []
    attempts = 0
    while len(protos) < spec.n_identities:
        attempts += 1
        if attempts > max_attempts:
            raise InvalidConfigError(
                f"could not place {spec.n_identities} prototypes {spec.min_angle_deg} degrees "
                f"apart in {spec.input_dim} dimensions")
        c = _unit(rng.standard_normal(spec.input_dim))
        if all(float(c @ p) <= min_cos for p in protos):
            protos.append(c)
    return np.stack(protos)


def _perturb(center: np.ndarray, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((n, center.size)) * (sigma / math.sqrt(center.size))
    return _unit(center[None, :] + noise)


def generate(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    protos = _prototypes(spec, rng)
    # shared appearance offset per camera (background, colour cast)
    cam_shift = spec.camera_sigma * _unit(rng.standard_normal((spec.n_cameras, spec.input_dim)))
    if spec.nuisance_dim:
        # tracklet drift confined to a fixed subspace: learnable viewpoint/lighting variation
        basis = np.linalg.qr(rng.standard_normal((spec.input_dim, spec.nuisance_dim)))[0]
    else:
        basis = np.eye(spec.input_dim)
    scale = spec.tracklet_sigma / math.sqrt(basis.shape[1])
    tracklets = []
    tid = 0
    for ident in range(spec.n_identities):
        for cam in range(1, spec.n_cameras + 1):
            for _ in range(spec.tracklets_per_identity_per_camera):
                L = int(rng.integers(spec.min_frames, spec.max_frames + 1))
                n_easy, n_hard, n_noise = kind_counts(L, spec.hard_fraction, spec.noise_fraction)
                # per-tracklet appearance drift (viewpoint, lighting)
                drift = (basis @ rng.standard_normal(basis.shape[1])) * scale
                base = protos[ident] + cam_shift[cam - 1]
                center = _unit(base + drift)
                # hard frames (pose changes) break away from the tracklet's own viewpoint
                hard_center = _unit(base + spec.hard_drift_share * drift)
                parts = [_perturb(center, spec.easy_sigma, n_easy, rng),
                         _perturb(hard_center, spec.hard_sigma, n_hard, rng)]
                if spec.noise_mode == "other_identity":
                    other = int(rng.choice([i for i in range(spec.n_identities) if i != ident])) \
                        if n_noise else ident
                    parts.append(_perturb(protos[other] + cam_shift[cam - 1], spec.easy_sigma,
                                          n_noise, rng))
                else:
                    parts.append(_unit(rng.standard_normal((n_noise, spec.input_dim))))
                kinds = np.array(["easy"] * n_easy + ["hard"] * n_hard + ["noise"] * n_noise)
                feats = np.concatenate(parts)
                order = rng.permutation(L)
                tracklets.append(Tracklet(f"t{tid:04d}", feats[order], f"id{ident:03d}",
                                          str(cam), kinds[order].tolist()))
                tid += 1
    return Dataset(tracklets, spec.input_dim, protos)


def split_query_gallery(dataset: Dataset) -> tuple[list[int], list[int]]:
    """Indices of query (first camera) and gallery (all other cameras) tracklets."""
    if not dataset.has_camera:
        raise InvalidInputError("query/gallery split needs camera annotations")
    cams = sorted({t.camera for t in dataset.tracklets},
                  key=lambda c: (0, int(c), c) if c.isdigit() else (1, 0, c))
    if len(cams) < 2:
        raise InvalidInputError("query/gallery split needs at least two cameras")
    qcam = cams[0]
    gallery = [i for i, t in enumerate(dataset.tracklets) if t.camera != qcam]
    gallery_ids = {dataset.tracklets[i].identity for i in gallery}
    query = []
    for i, t in enumerate(dataset.tracklets):
        if t.camera != qcam:
            continue
        if t.identity not in gallery_ids:
            warnings.warn(f"identity {t.identity} of tracklet {t.tracklet_id} has no gallery "
                          "match; excluded from queries", RuntimeWarning)
            continue
        query.append(i)
    return query, gallery


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: Dataset, path) -> None:
    lines = [DATASET_HEADER.format(dim=dataset.dim)]
    for t in dataset.tracklets:
        if t.features.shape[1] != dataset.dim:
            raise InvalidInputError(f"tracklet {t.tracklet_id} has dimension {t.features.shape[1]}")
        for j, row in enumerate(t.features):
            kind = t.kinds[j] if t.kinds is not None else "-"
            meta = [t.tracklet_id, t.identity or "-", t.camera or "-", kind]
            lines.append("\t".join(meta + [repr(float(x)) for x in row]))
    atomic_write_text(path, "\n".join(lines) + "\n")


_HEADER_RE = re.compile(r"^#nhac-dataset v1 dim=(\d+) fields=(\S+)$")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        match = _HEADER_RE.match(header)
        if not match:
            raise InvalidInputError(f"{path}:1: not an nhac dataset header: {header!r}")
        dim = int(match.group(1))
        rows: dict[str, dict] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 5:
                raise InvalidInputError(f"{path}:{lineno}: malformed record ({len(cols)} fields)")
            tid, ident, cam, kind = cols[:4]
            try:
                feat = [float(x) for x in cols[4:]]
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad feature value ({exc})") from None
            if len(feat) != dim:
                raise InvalidInputError(
                    f"{path}:{lineno}: tracklet {tid} has a frame of dimension {len(feat)}, "
                    f"expected {dim}")
            if kind != "-" and kind not in KINDS:
                raise InvalidInputError(f"{path}:{lineno}: unknown frame kind {kind!r}")
            rec = rows.setdefault(tid, {"identity": ident, "camera": cam, "kinds": [], "feats": []})
            if (rec["identity"], rec["camera"]) != (ident, cam):
                raise InvalidInputError(
                    f"{path}:{lineno}: tracklet {tid} changes identity/camera mid-tracklet")
            rec["kinds"].append(kind)
            rec["feats"].append(feat)
    tracklets = []
    for tid, rec in rows.items():
        kinds = rec["kinds"]
        tracklets.append(Tracklet(
            tid, np.array(rec["feats"], dtype=np.float64),
            None if rec["identity"] == "-" else rec["identity"],
            None if rec["camera"] == "-" else rec["camera"],
            None if all(k == "-" for k in kinds) else kinds))
    if not tracklets:
        raise InvalidInputError(f"{path}: dataset has no frames")
    return Dataset(tracklets, dim)


def save_model_state(model, path) -> None:
    """Header line, one ``name shape`` line per parameter, then its values (order W1 b1 W2 b2)."""
    from nhac.model import PARAM_ORDER

    lines = [MODEL_HEADER,
             f"input_dim={model.input_dim} hidden_dim={model.hidden_dim} "
             f"embed_dim={model.embed_dim} dropout_rate={model.dropout_rate!r}"]
    for name in PARAM_ORDER:
        arr = model.params[name]
        lines.append(f"{name} {'x'.join(str(s) for s in arr.shape)}")
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_model_state(path):
    from nhac.model import PARAM_ORDER, EmbeddingModel

    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MODEL_HEADER:
        raise InvalidInputError(f"{path}: not an nhac model-state file")
    meta = dict(kv.split("=") for kv in lines[1].split())
    model = EmbeddingModel(int(meta["input_dim"]), int(meta["hidden_dim"]),
                           int(meta["embed_dim"]), float(meta["dropout_rate"]))
    pos = 2
    for name in PARAM_ORDER:
        got, shape = lines[pos].split()
        if got != name:
            raise InvalidInputError(f"{path}:{pos + 1}: expected parameter {name}, found {got}")
        shape = tuple(int(s) for s in shape.split("x"))
        values = np.array([float(x) for x in lines[pos + 1].split()], dtype=np.float64)
        if values.size != math.prod(shape):
            raise InvalidInputError(f"{path}:{pos + 2}: {name} has {values.size} values")
        model.params[name] = values.reshape(shape)
        pos += 2
    return model
