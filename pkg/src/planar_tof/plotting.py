"""SVG figures for protocol results.

Figures are written with a fixed SVG hash salt and no date metadata so the
same result always produces byte-identical files.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._io import atomic_write_text  # noqa: E402

STYLE = {
    "svg.hashsalt": "planar-tof",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (4.5, 3.4),
}

COLORS = {"histogram": "#1f77b4", "peaks": "#ff7f0e", "onboard": "#2ca02c"}
LABELS = {"histogram": "Histograms", "peaks": "Histogram peaks", "onboard": "Onboard distances"}


def _save(fig, path: Path) -> Path:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())
    return path


def plot_roc(reports: dict, path, title: str = "ROC") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, rep in reports.items():
            ax.plot(rep.roc.fpr, rep.roc.tpr, color=COLORS.get(name),
                    label=f"{LABELS.get(name, name)} ({rep.auroc:.2f})")
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.set(xlabel="False positive rate", ylabel="True positive rate", title=title,
               xlim=(0, 1), ylim=(0, 1.02))
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_score_histogram(scores, is_deviation, threshold, path) -> Path:
    """Histogram of log-likelihood scores per class with the decision threshold."""
    scores = np.asarray(scores, dtype=float)
    dev = np.asarray(is_deviation, dtype=bool)
    lo, hi = np.percentile(scores, [1, 100])
    bins = np.linspace(min(lo, threshold), hi, 40)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mask, name, color in ((~dev, "planar", "#1f77b4"), (dev, "deviation", "#d62728")):
            if mask.any():
                ax.hist(np.clip(scores[mask], bins[0], None), bins=bins, alpha=0.6,
                        color=color, label=name)
        ax.axvline(threshold, color="k", lw=1, ls="--", label="threshold")
        ax.set(xlabel="Log-likelihood", ylabel="Frames")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_detection_by_distance(table: list, methods, path) -> Path:
    centers = np.array([(r["lo"] + r["hi"]) / 2 for r in table])
    width = 0.08 / max(len(methods), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, m in enumerate(methods):
            rates = [np.nan if r[m] is None else r[m] for r in table]
            ax.bar(centers + (j - (len(methods) - 1) / 2) * width, rates, width,
                   color=COLORS.get(m), label=LABELS.get(m, m))
        ax.set(xlabel="Distance to object (m)", ylabel="Detection rate", ylim=(0, 1.02))
        ax.set_xticks(centers, [f"{r['lo']:.1f}-{r['hi']:.1f}" for r in table], rotation=30)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_cliff(table: list, methods, path) -> Path:
    d = [r["edge_distance_m"] for r in table]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in methods:
            ax.plot(d, [r[m] for r in table], marker="o", ms=3, color=COLORS.get(m),
                    label=LABELS.get(m, m))
        ax.set(xlabel="Distance to edge (m)", ylabel="Detection rate (0 false positives)",
               ylim=(-0.02, 1.02))
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_sample_sweep(table: list, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in sorted({r["method"] for r in table}):
            rows = [r for r in table if r["method"] == m]
            n = [r["n_total"] for r in rows]
            ax.fill_between(n, [r["min"] for r in rows], [r["max"] for r in rows],
                            color=COLORS.get(m), alpha=0.2, lw=0)
            ax.plot(n, [r["mean"] for r in rows], color=COLORS.get(m), label=LABELS.get(m, m))
        ax.set(xlabel="Training measurements", ylabel="AUROC")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_bars(labels, values, path, ylabel="AUROC", title=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 0.35 * len(labels) + 1.0))
        y = np.arange(len(labels))
        ax.barh(y, values, color=COLORS["histogram"])
        ax.set_yticks(y, labels)
        ax.invert_yaxis()
        ax.set(xlabel=ylabel, xlim=(0, 1.0), title=title)
        for yi, v in zip(y, values):
            ax.text(v + 0.01, yi, f"{v:.2f}", va="center", fontsize=8)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_surface_splits(table: list, path) -> Path:
    rows = [r for r in table if r["method"] == "histogram"] or table
    conditions = ("all", "test_only", "all_but_test")
    x = np.arange(len(rows))
    width = 0.25
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for j, cond in enumerate(conditions):
            ax.bar(x + (j - 1) * width, [r[cond] for r in rows], width, label=cond)
        ax.set_xticks(x, [r["test_surface"] for r in rows], rotation=30)
        ax.set(ylabel="AUROC", ylim=(0, 1.02))
        ax.legend(frameon=False, ncol=3, loc="lower center")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_ambiguity(table: list, path) -> Path:
    """Box and albedo-patch scores per method, relative to each method's threshold."""
    x = np.arange(len(table))
    width = 0.35
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, (key, name) in enumerate((("box_score", "geometric box"),
                                         ("patch_score", "albedo patch"))):
            rel = [r[key] - r["threshold"] for r in table]
            ax.bar(x + (j - 0.5) * width, rel, width, label=name)
        ax.axhline(0.0, color="k", lw=1, ls="--")
        ax.set_yscale("symlog")
        ax.set_xticks(x, [LABELS.get(r["method"], r["method"]) for r in table])
        ax.set(ylabel="Score minus threshold")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def render_figures(result, outdir) -> list:
    """Draw the figures that suit ``result.protocol`` into ``outdir``; returns the paths."""
    out = Path(outdir)
    p = result.protocol
    paths = []
    if p in ("per_object", "by_distance"):
        paths.append(plot_roc(result.reports, out / "roc.svg"))
    if p == "by_distance":
        paths.append(plot_detection_by_distance(result.table, list(result.reports),
                                                 out / "detection_by_distance.svg"))
    if p == "cliff_range":
        paths.append(plot_cliff(result.table, list(result.reports), out / "cliff_detection.svg"))
    if p == "sample_sweep" and result.table:
        paths.append(plot_sample_sweep(result.table, out / "sample_sweep.svg"))
    if p == "ablation":
        paths.append(plot_bars([r["configuration"] for r in result.table],
                               [r["auroc"] for r in result.table], out / "ablation.svg"))
    if p == "surface_splits":
        paths.append(plot_surface_splits(result.table, out / "surface_splits.svg"))
    if p == "ambiguity" and result.table:
        paths.append(plot_ambiguity(result.table, out / "ambiguity.svg"))
    return paths
