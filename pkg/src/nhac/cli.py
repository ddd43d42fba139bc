"""Command-line front end: data generation, runs, comparisons, evaluation and plots.

Exit status: 0 on success, 1 on invalid input or configuration, 2 when a run aborts.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from pathlib import Path

from nhac.configio import dump_json, read_json
from nhac.errors import InvalidConfigError, InvalidInputError
from nhac.pipeline import (
    REPORT_COLUMNS,
    PipelineConfig,
    RunAborted,
    ablation,
    compare_resampling,
    delta_sweep,
    evaluate,
    run,
    summary_rows,
)
from nhac.synthdata import (
    SyntheticSpec,
    atomic_write_text,
    generate,
    load_dataset,
    load_model_state,
    save_dataset,
    save_model_state,
)

log = logging.getLogger("nhac")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2
DEFAULT_DELTAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; here that status means a runtime abort
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


# ---- output helpers ----------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows, columns) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _write_report_dir(out: Path, report, with_plots: bool) -> None:
    from nhac import plotting

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "report.csv", report.rows, REPORT_COLUMNS)
    write_csv(out / "merge_log.csv",
              [{"iteration": m.iteration, "kept": m.a, "absorbed": m.b, "distance": m.distance}
               for m in report.merge_log],
              ("iteration", "kept", "absorbed", "distance"))
    atomic_write_text(out / "config.json", dump_json(report.config))
    if report.labels is not None:
        write_csv(out / "labels.csv", [{"index": i, "label": int(y)} for i, y in enumerate(report.labels)],
                  ("index", "label"))
    if report.model is not None:
        save_model_state(report.model, out / "model.txt")
    if with_plots and report.rows:
        plotting.plot_trajectory(report.rows, out / "trajectory.svg")
        plotting.plot_node_percentages(report.rows, out / "node_percentages.svg")


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower()


# ---- argument handling -------------------------------------------------------------

def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("NHAC_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise InvalidConfigError(f"NHAC_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise InvalidConfigError(f"thread count must be positive, got {n}")
    return n


def _existing(path, flag: str) -> Path:
    if path is None:
        raise InvalidInputError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"{flag}: no such file: {p}")
    return p


def _pipeline_config(args) -> PipelineConfig:
    data = read_json(_existing(args.config, "--config")) if args.config else {}
    cfg = PipelineConfig.from_dict(data)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _out_dir(args) -> Path:
    if args.out is None:
        raise InvalidInputError("--out is required")
    return Path(args.out)


# ---- subcommands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    data = read_json(_existing(args.config, "--config")) if args.config else {}
    spec = SyntheticSpec.from_dict(data)
    if args.seed is not None:
        spec.seed = args.seed
    if args.out is None:
        raise InvalidInputError("--out is required")
    ds = generate(spec)
    save_dataset(ds, args.out)
    frames = sum(len(t) for t in ds.tracklets)
    print(f"wrote {len(ds)} tracklets ({frames} frames) to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _pipeline_config(args)
    dataset = load_dataset(_existing(args.data, "--data"))
    out = _out_dir(args)
    try:
        report = run(cfg, dataset, threads=_threads(args))
    except RunAborted as exc:
        _write_report_dir(out, exc.report, with_plots=False)
        log.error("run aborted after %d rows: %s", len(exc.report.rows), exc)
        return EXIT_ABORT
    _write_report_dir(out, report, with_plots=not args.no_plots)
    best = report.best("mAP")
    print(f"{len(report.rows)} rows, final C={report.final['clusters']}, "
          f"best mAP={_cell(best['mAP'])} at iteration {best['iteration']} "
          f"({report.wall_clock:.1f}s)")
    return EXIT_OK


def _comparison(args, reports: dict, key: str, stem: str, plot) -> int:
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    summary = summary_rows(reports, key)
    write_csv(out / f"{stem}.csv", summary, list(summary[0]))
    for name, rep in reports.items():
        write_csv(out / f"{stem}_{_slug(str(name))}_report.csv", rep.rows, REPORT_COLUMNS)
    if not args.no_plots:
        plot(summary, reports, out)
    for r in summary:
        print(", ".join(f"{k}={_cell(v)}" for k, v in r.items()))
    return EXIT_OK


def _run_comparison(args, fn, *extra):
    cfg = _pipeline_config(args)
    dataset = load_dataset(_existing(args.data, "--data"))
    try:
        return fn(cfg, dataset, *extra, threads=_threads(args))
    except RunAborted as exc:
        log.error("comparison aborted: %s", exc)
        return None


def cmd_ablate(args) -> int:
    from nhac import plotting

    reports = _run_comparison(args, ablation)
    if reports is None:
        return EXIT_ABORT

    def plot(summary, reps, out):
        plotting.plot_bars(summary, "variant", ("final_pair_f1", "best_rank1", "best_mAP"),
                           out / "ablation.svg")
        plotting.plot_curves({k: r.rows for k, r in reps.items()}, "pair_f1",
                             out / "ablation_pair_f1.svg")
    return _comparison(args, reports, "variant", "ablation", plot)


def cmd_sweep_delta(args) -> int:
    from nhac import plotting

    try:
        deltas = [float(x) for x in args.deltas.split(",")] if args.deltas else list(DEFAULT_DELTAS)
    except ValueError:
        raise InvalidConfigError(f"--deltas must be comma-separated numbers, got {args.deltas!r}") from None
    reports = _run_comparison(args, delta_sweep, deltas)
    if reports is None:
        return EXIT_ABORT

    def plot(summary, reps, out):
        plotting.plot_sweep(summary, "delta", out / "delta_sweep.svg")
        plotting.plot_bars(summary, "delta", ("final_pair_f1",), out / "delta_sweep_f1.svg")
    return _comparison(args, reports, "delta", "delta_sweep", plot)


def cmd_compare_resampling(args) -> int:
    from nhac import plotting

    reports = _run_comparison(args, compare_resampling)
    if reports is None:
        return EXIT_ABORT

    def plot(summary, reps, out):
        plotting.plot_bars(summary, "criterion", ("best_rank1", "best_mAP", "final_pair_f1"),
                           out / "resampling.svg")
    return _comparison(args, reports, "criterion", "resampling", plot)


def cmd_eval(args) -> int:
    dataset = load_dataset(_existing(args.data, "--data"))
    run_dir = Path(args.run_dir) if args.run_dir else None
    model_path = args.model or (run_dir / "model.txt" if run_dir else None)
    model = load_model_state(_existing(model_path, "--model"))
    if model.input_dim != dataset.dim:
        raise InvalidInputError(f"model expects dimension {model.input_dim}, dataset has {dataset.dim}")
    labels = None
    if run_dir is not None and (run_dir / "labels.csv").exists():
        labels = [int(r["label"]) for r in read_csv(run_dir / "labels.csv")]
    metrics = evaluate(model, dataset, labels, threads=_threads(args))
    if args.out:
        write_csv(args.out, [metrics], list(metrics))
    for k, v in metrics.items():
        print(f"{k}: {_cell(v)}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from nhac import plotting

    rows = read_csv(_existing(args.report, "--report"))
    missing = {"iteration", "rank1", "mAP", "pair_f1"} - set(rows[0] if rows else ())
    if missing:
        raise InvalidInputError(f"--report lacks columns: {', '.join(sorted(missing))}")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    plotting.plot_trajectory(rows, out / "trajectory.svg")
    if {"hard_pct", "noise_pct"} <= set(rows[0]):
        plotting.plot_node_percentages(rows, out / "node_percentages.svg")
    print(f"wrote plots to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nhac", description="Noise- and hard-frame-aware tracklet clustering.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat JSON config file")
        if data:
            sp.add_argument("--data", help="dataset file")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--threads", type=int, help="worker threads (default: $NHAC_THREADS or 1)")
        sp.add_argument("--no-plots", action="store_true", help="skip SVG output")

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("run", help="cluster and retrain; write a report directory")
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("ablate", help="compare runs with each module switched off")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("sweep-delta", help="repeat the run over trimming strengths")
    common(sp)
    sp.add_argument("--deltas", help="comma-separated values in (0, 1]")
    sp.set_defaults(fn=cmd_sweep_delta)

    sp = sub.add_parser("compare-resampling", help="compare the three re-sampling criteria")
    common(sp)
    sp.set_defaults(fn=cmd_compare_resampling)

    sp = sub.add_parser("eval", help="recompute metrics from a saved model")
    sp.add_argument("--data", help="dataset file")
    sp.add_argument("--run-dir", help="report directory holding model.txt and labels.csv")
    sp.add_argument("--model", help="model-state file (overrides --run-dir)")
    sp.add_argument("--out", help="CSV file for the metrics")
    sp.add_argument("--threads", type=int)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("plot", help="draw SVG charts from a report.csv")
    sp.add_argument("--report", help="report.csv written by run")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"nhac {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"nhac {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
