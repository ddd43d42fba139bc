"""The iterative cluster-and-retrain loop and the experiment harnesses built on it."""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from nhac import gtm, nrm
from nhac.clustering import assign_pseudo_labels, init_clusters, merge_step, rebuild_lookup
from nhac.configio import from_mapping
from nhac.errors import InvalidConfigError, InvalidInputError, NonFiniteLossError
from nhac.gtm import pairwise_distances
from nhac.metrics import cmc_curve, mean_ap, node_percentages, pairwise_f1, trim_quality
from nhac.model import EmbeddingModel, SgdOptimizer, TrainSample, train_step
from nhac.synthdata import Dataset, split_query_gallery

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "iteration", "clusters", "rank1", "rank5", "rank10", "mAP",
    "pair_precision", "pair_recall", "pair_f1", "trim_precision", "trim_recall",
    "hard_pct", "noise_pct", "id_loss", "triplet_loss",
)

ABLATION_VARIANTS = (
    ("Baseline", False, False),
    ("NHAC w/o NRM", True, False),
    ("NHAC w/o GTM", False, True),
    ("NHAC", True, True),
)

# independent random streams derived from the master seed
_STREAM_MODEL, _STREAM_TRAIN, _STREAM_RESAMPLE = 1, 2, 3


@dataclass
class PipelineConfig:
    mp: float = 0.05
    K: int = 2
    delta: float = 0.5
    alpha: float = 0.3
    tau: float = 0.1
    M: int = 16
    batch_size: int = 16
    dropout: float = 0.5
    first_stage_epochs: int = 20
    later_stage_epochs: int = 2
    lr: float = 0.1
    lr_drop_epoch: int = 15
    lr_after: float = 0.01
    momentum: float = 0.9
    iterations: int = 18
    resampling: str = "over"
    gtm_enabled: bool = True
    nrm_enabled: bool = True
    nrm_on_full_tracklet: bool = True  # False: re-sample GTM survivors only
    triplet_weight: float = 1.0
    hidden_dim: int = 64
    embed_dim: int = 32
    merge_budget_base: str = "original"
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if not 0 < self.mp < 1:
            raise InvalidConfigError(f"mp must be in (0, 1), got {self.mp}")
        if self.K < 1 or self.M < 1 or self.M % self.K:
            raise InvalidConfigError(f"M={self.M} must be a positive multiple of K={self.K}")
        if not 0 < self.delta:
            raise InvalidConfigError(f"delta must be positive, got {self.delta}")
        if self.alpha < 0 or self.tau <= 0:
            raise InvalidConfigError("alpha must be >= 0 and tau > 0")
        if self.batch_size < 1 or self.hidden_dim < 1 or self.embed_dim < 1:
            raise InvalidConfigError("batch_size and layer sizes must be positive")
        if not 0 <= self.dropout < 1 or not 0 <= self.momentum < 1:
            raise InvalidConfigError("dropout and momentum must be in [0, 1)")
        if min(self.first_stage_epochs, self.later_stage_epochs, self.iterations) < 0:
            raise InvalidConfigError("epoch and iteration counts must be non-negative")
        if self.lr < 0 or self.lr_after < 0 or self.triplet_weight < 0:
            raise InvalidConfigError("learning rates and loss weights must be non-negative")
        if self.resampling not in nrm.CRITERIA:
            raise InvalidConfigError(f"resampling must be one of {nrm.CRITERIA}")
        if self.merge_budget_base not in ("original", "current"):
            raise InvalidConfigError("merge_budget_base must be 'original' or 'current'")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return from_mapping(cls, data).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunReport:
    rows: list[dict]
    config: dict
    seed: int
    wall_clock: float = 0.0
    merge_log: list = field(default_factory=list)
    model: EmbeddingModel | None = field(default=None, repr=False)
    error: str | None = None
    labels: np.ndarray | None = None  # final pseudo label per tracklet

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def best(self, metric: str = "mAP") -> dict:
        """Row with the highest value of ``metric`` (earliest on ties)."""
        scored = [r for r in self.rows if r[metric] is not None and not np.isnan(r[metric])]
        if not scored:
            return self.rows[-1]
        return max(scored, key=lambda r: r[metric])

    @property
    def final(self) -> dict:
        return self.rows[-1]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def extract_graphs(model: EmbeddingModel, dataset: Dataset, delta: float, trim: bool,
                   threads: int = 1) -> list[gtm.TrackletGraph]:
    """Embed every frame and build one graph per tracklet, trimmed when ``trim``."""
    def one(t):
        g = gtm.build_graph(model.embed_frames(t.features))
        if trim:
            gtm.trim(g, delta)
        else:
            g.survivor_mask = np.ones(g.n_nodes, dtype=bool)
            g.trimmed_feature = g.centroid
        return g
    return _map(one, dataset.tracklets, threads)


def tracklet_embeddings(model: EmbeddingModel, dataset: Dataset, threads: int = 1) -> np.ndarray:
    """Evaluation features: average pooling over all frames, nothing trimmed."""
    return np.stack(_map(lambda t: model.embed_frames(t.features).mean(axis=0),
                         dataset.tracklets, threads))


def node_splits(graphs, on_survivors: bool) -> list[nrm.NodeSplit]:
    splits = []
    for g in graphs:
        if on_survivors and not g.survivor_mask.all():
            ids = np.flatnonzero(g.survivor_mask)
            sub = gtm.build_graph(g.node_features[ids])
            splits.append(nrm.split_nodes(sub.similarities, ids))
        else:
            splits.append(nrm.split_nodes(g.similarities))
    return splits


class _Evaluator:
    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.identities = dataset.identities() if dataset.has_identity else None
        self.query = self.gallery = None
        if dataset.has_identity and dataset.has_camera:
            try:
                self.query, self.gallery = split_query_gallery(dataset)
            except InvalidInputError as exc:
                log.warning("retrieval metrics unavailable: %s", exc)

    def retrieval(self, feats: np.ndarray) -> dict:
        if not self.query or not self.gallery:
            return {"rank1": None, "rank5": None, "rank10": None, "mAP": None}
        D = pairwise_distances(feats[self.query], feats[self.gallery])
        qid = [self.identities[i] for i in self.query]
        gid = [self.identities[i] for i in self.gallery]
        cmc = cmc_curve(D, qid, gid, ks=(1, 5, 10))
        return {"rank1": cmc[1], "rank5": cmc[5], "rank10": cmc[10], "mAP": mean_ap(D, qid, gid)}

    def clustering(self, labels) -> dict:
        if self.identities is None:
            return {"pair_precision": None, "pair_recall": None, "pair_f1": None}
        p, r, f = pairwise_f1(labels, self.identities)
        return {"pair_precision": p, "pair_recall": r, "pair_f1": f}


class _Trainer:
    def __init__(self, cfg: PipelineConfig, model: EmbeddingModel, dataset: Dataset):
        self.cfg = cfg
        self.model = model
        self.frames = [t.features for t in dataset.tracklets]
        self.rng = _rng(cfg.seed, _STREAM_TRAIN)

    def stage(self, table, labels, pools, epochs: int, use_triplets: bool) -> tuple[float, float]:
        cfg = self.cfg
        opt = SgdOptimizer(cfg.lr, cfg.momentum, cfg.lr_drop_epoch, cfg.lr_after)
        n = len(self.frames)
        last = (float("nan"), float("nan"))
        for epoch in range(1, epochs + 1):
            order = self.rng.permutation(n)
            id_sum = trip_sum = 0.0
            n_batches = 0
            for start in range(0, n, cfg.batch_size):
                members = order[start:start + cfg.batch_size]
                samples = []
                for i in members:
                    idx = nrm.sample_training_frames(pools[i], cfg.M, self.rng)
                    samples.append(TrainSample(self.frames[i][idx], int(labels[i])))
                triplets = []
                if use_triplets:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        triplets = nrm.build_triplets(labels[members], cfg.K, cfg.M, self.rng)
                id_l, trip_l = train_step(self.model, table, opt, samples, triplets, epoch,
                                          cfg.triplet_weight, cfg.alpha, self.rng)
                id_sum += id_l
                trip_sum += trip_l
                n_batches += 1
            last = (id_sum / n_batches, trip_sum / n_batches)
        return last


def _empty_row(iteration: int, clusters: int) -> dict:
    row = dict.fromkeys(REPORT_COLUMNS)
    row["iteration"] = iteration
    row["clusters"] = clusters
    return row


def run(config: PipelineConfig, dataset: Dataset, threads: int = 1) -> RunReport:
    cfg = config.validate()
    if len(dataset) == 0:
        raise InvalidInputError("dataset has no tracklets")
    for t in dataset.tracklets:
        if t.features.ndim != 2 or t.features.shape[1] != dataset.dim or len(t.features) == 0:
            raise InvalidInputError(f"tracklet {t.tracklet_id} is empty or has the wrong dimension")
    started = time.perf_counter()
    model = EmbeddingModel(dataset.dim, cfg.hidden_dim, cfg.embed_dim, cfg.dropout,
                           seed=int(_rng(cfg.seed, _STREAM_MODEL).integers(2**63)))
    resample_rng = _rng(cfg.seed, _STREAM_RESAMPLE)
    evaluator = _Evaluator(dataset)
    trainer = _Trainer(cfg, model, dataset)
    report = RunReport([], cfg.to_dict(), cfg.seed, model=model)

    state = init_clusters(len(dataset))
    labels = assign_pseudo_labels(state)
    full_pools = [np.arange(len(t)) for t in dataset.tracklets]

    try:
        init_feats = tracklet_embeddings(model, dataset, threads)
        table = rebuild_lookup(state, init_feats, cfg.tau)
        losses = trainer.stage(table, labels, full_pools, cfg.first_stage_epochs, cfg.nrm_enabled)
        row = _empty_row(0, state.cluster_count)
        row.update(evaluator.retrieval(tracklet_embeddings(model, dataset, threads)))
        row.update(evaluator.clustering(labels))
        row["id_loss"], row["triplet_loss"] = losses
        report.rows.append(row)

        for it in range(1, cfg.iterations + 1):
            if state.cluster_count == 1:
                break
            graphs = extract_graphs(model, dataset, cfg.delta, cfg.gtm_enabled, threads)
            feats = np.stack([g.trimmed_feature for g in graphs])
            base = len(dataset) if cfg.merge_budget_base == "original" else state.cluster_count
            merge_step(state, feats, cfg.mp, budget_base=base)
            labels = assign_pseudo_labels(state)
            table = rebuild_lookup(state, feats, cfg.tau)

            on_survivors = cfg.gtm_enabled and not cfg.nrm_on_full_tracklet
            splits = node_splits(graphs, on_survivors)
            if cfg.nrm_enabled:
                pools = [nrm.resample(s, cfg.resampling, resample_rng).indices for s in splits]
            else:
                pools = full_pools
            losses = trainer.stage(table, labels, pools, cfg.later_stage_epochs, cfg.nrm_enabled)

            row = _empty_row(it, state.cluster_count)
            row.update(evaluator.retrieval(tracklet_embeddings(model, dataset, threads)))
            row.update(evaluator.clustering(labels))
            masks = [g.survivor_mask for g in graphs]
            if cfg.gtm_enabled and dataset.has_kinds:
                row["trim_precision"], row["trim_recall"] = trim_quality(
                    masks, [t.kinds for t in dataset.tracklets])
            row["hard_pct"], row["noise_pct"] = node_percentages(splits, masks)
            row["id_loss"], row["triplet_loss"] = losses
            report.rows.append(row)
            log.info("iteration %d: C=%d mAP=%s F1=%s", it, row["clusters"], row["mAP"],
                     row["pair_f1"])
    except NonFiniteLossError as exc:
        report.error = str(exc)
        log.error("run aborted: %s", exc)
    report.merge_log = list(state.merge_log)
    report.labels = assign_pseudo_labels(state)
    report.wall_clock = time.perf_counter() - started
    if report.error is not None:
        raise RunAborted(report)
    return report


def evaluate(model: EmbeddingModel, dataset: Dataset, labels=None, threads: int = 1) -> dict:
    """Retrieval metrics of ``model`` on ``dataset``, plus pairwise scores when labels are given."""
    ev = _Evaluator(dataset)
    out = ev.retrieval(tracklet_embeddings(model, dataset, threads))
    if labels is not None:
        if len(labels) != len(dataset):
            raise InvalidInputError(f"{len(labels)} labels for {len(dataset)} tracklets")
        out.update(ev.clustering(labels))
    return out


class RunAborted(NonFiniteLossError):
    """Non-finite loss; ``report`` holds the rows completed before the abort."""

    def __init__(self, report: RunReport):
        super().__init__(report.error)
        self.report = report


def _variant(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return dataclasses.replace(cfg, **changes).validate()


def ablation(config: PipelineConfig, dataset: Dataset, threads: int = 1) -> dict[str, RunReport]:
    """Baseline, w/o NRM, w/o GTM and full runs on the same data and seed."""
    return {name: run(_variant(config, gtm_enabled=g, nrm_enabled=n), dataset, threads)
            for name, g, n in ABLATION_VARIANTS}


def delta_sweep(config: PipelineConfig, dataset: Dataset, deltas, threads: int = 1) -> dict[float, RunReport]:
    out = {}
    for d in deltas:
        if not 0 < d <= 1:
            raise InvalidConfigError(f"sweep deltas must lie in (0, 1], got {d}")
        out[float(d)] = run(_variant(config, delta=float(d)), dataset, threads)
    return out


def compare_resampling(config: PipelineConfig, dataset: Dataset, threads: int = 1) -> dict[str, RunReport]:
    return {c: run(_variant(config, resampling=c, nrm_enabled=True), dataset, threads)
            for c in nrm.CRITERIA}


def summary_rows(reports: dict, key_name: str) -> list[dict]:
    """One comparison row per report: best and final retrieval scores plus final F1."""
    rows = []
    for key, rep in reports.items():
        best_r1 = rep.best("rank1")
        best_map = rep.best("mAP")
        rows.append({
            key_name: key,
            "best_rank1": best_r1["rank1"],
            "best_mAP": best_map["mAP"],
            "best_iteration": best_map["iteration"],
            "final_rank1": rep.final["rank1"],
            "final_mAP": rep.final["mAP"],
            "final_pair_f1": rep.final["pair_f1"],
            "final_clusters": rep.final["clusters"],
        })
    return rows
