"""Figure rendering for evaluation and bound-verification reports.

Figures are written next to the delimited tables so a report directory is
self-contained.  The Agg backend is forced before pyplot is imported; the
package never needs a display.
"""

from __future__ import annotations

import os
import tempfile
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from relax.engine import BoundCurveRow, bound_for_masks
from relax.evalmetrics import ScoreRow


def _atomic_savefig(figure: "plt.Figure", path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png")
    try:
        with os.fdopen(fd, "wb") as handle:
            figure.savefig(handle, format="png", dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(figure)


def score_figure(rows: Sequence[ScoreRow], path: str) -> None:
    """Grouped bar chart of mean scores (error bars = std over repeats)."""
    if not rows:
        raise ValueError("no score rows to plot")
    metrics = list(dict.fromkeys(row.metric for row in rows))
    methods = list(dict.fromkeys(row.method for row in rows))
    by_key = {(row.method, row.metric): row for row in rows}

    figure, axes = plt.subplots(figsize=(1.8 + 1.6 * len(metrics), 3.6))
    positions = np.arange(len(metrics), dtype=np.float64)
    width = 0.8 / len(methods)
    for m, method in enumerate(methods):
        offsets = positions + (m - (len(methods) - 1) / 2.0) * width
        means = [by_key[(method, metric)].mean for metric in metrics]
        stds = [by_key[(method, metric)].std for metric in metrics]
        axes.bar(offsets, means, width=width, yerr=stds, capsize=3, label=method)
    axes.set_xticks(positions)
    axes.set_xticklabels(metrics)
    axes.set_ylabel("score")
    axes.set_title("explanation quality by method")
    axes.legend(fontsize="small")
    axes.grid(axis="y", alpha=0.3)
    _atomic_savefig(figure, path)


def bound_figure(rows: Sequence[BoundCurveRow], delta: float, path: str) -> None:
    """Max importance error vs mask count, against the concentration bound."""
    if not rows:
        raise ValueError("no bound rows to plot")
    figure, axes = plt.subplots(figsize=(5.2, 3.8))
    ns = [row.n_masks for row in rows]
    for row in rows:
        axes.plot([row.n_masks] * len(row.errors), row.errors, "k.", alpha=0.45, ms=4)
    axes.plot(ns, [row.mean_error for row in rows], "o-", label="mean observed error")
    grid = np.geomspace(min(ns), max(ns), 64)
    axes.plot(grid, [bound_for_masks(int(n), delta) for n in grid], "--",
              label=f"bound at confidence {1.0 - delta:g}")
    axes.set_xscale("log")
    axes.set_yscale("log")
    axes.set_xlabel("masks")
    axes.set_ylabel("max |importance error|")
    axes.set_title("importance estimate concentration")
    axes.legend(fontsize="small")
    axes.grid(alpha=0.3, which="both")
    _atomic_savefig(figure, path)
