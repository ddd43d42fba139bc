"""Static SVG charts for run reports and comparisons."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from nhac.synthdata import atomic_write_text  # noqa: E402

# fixed ids and no timestamp so identical inputs give identical files
plt.rcParams["svg.hashsalt"] = "nhac"


def _save(fig, path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def _floats(rows, key):
    out = []
    for r in rows:
        v = r.get(key)
        out.append(float("nan") if v in (None, "") else float(v))
    return out


def plot_trajectory(rows, path, title="") -> None:
    """Rank-1, mAP and pairwise F1 against iteration."""
    its = [int(r["iteration"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("rank1", "Rank-1"), ("mAP", "mAP"), ("pair_f1", "pairwise F1")):
        ax.plot(its, _floats(rows, key), marker="o", ms=3, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_node_percentages(rows, path) -> None:
    its = [int(r["iteration"]) for r in rows]
    hard, noise = _floats(rows, "hard_pct"), _floats(rows, "noise_pct")
    fig, ax = plt.subplots(figsize=(6, 4))
    w = 0.4
    ax.bar([i - w / 2 for i in its], hard, w, label="hard %")
    ax.bar([i + w / 2 for i in its], noise, w, label="trimmed %")
    ax.set_xlabel("iteration")
    ax.set_ylabel("% of frames")
    ax.legend()
    _save(fig, path)


def plot_curves(curves: dict, metric: str, path, title="") -> None:
    """One line per named report (``curves`` maps name to rows)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in curves.items():
        ax.plot([int(r["iteration"]) for r in rows], _floats(rows, metric), marker="o", ms=3,
                label=str(name))
    ax.set_xlabel("iteration")
    ax.set_ylabel(metric)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_sweep(summary, key, path) -> None:
    """Best Rank-1 and best mAP against the swept value."""
    xs = [float(r[key]) for r in summary]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, _floats(summary, "best_rank1"), marker="o", label="best Rank-1")
    ax.plot(xs, _floats(summary, "best_mAP"), marker="s", label="best mAP")
    ax.set_xlabel(key)
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_bars(summary, key, metrics, path) -> None:
    names = [str(r[key]) for r in summary]
    fig, ax = plt.subplots(figsize=(7, 4))
    w = 0.8 / len(metrics)
    for k, m in enumerate(metrics):
        ax.bar([i + (k - (len(metrics) - 1) / 2) * w for i in range(len(names))],
               _floats(summary, m), w, label=m)
    ax.set_xticks(range(len(names)), names, fontsize=8)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    _save(fig, path)
