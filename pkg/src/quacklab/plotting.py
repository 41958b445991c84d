"""Matplotlib rendering for metrics files.

Output is byte-stable: the SVG hash salt is fixed and the date stamp is
dropped, so identical input gives identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "quacklab",
    "svg.fonttype": "none",
    "path.simplify": False,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def series_gid(name: str) -> str:
    return f"series-{name}"


def plot_series(columns: Mapping[str, np.ndarray], series: Sequence[str], destination,
                log_scale: bool = False, title: Optional[str] = None,
                x: str = "step") -> Path:
    missing = [s for s in series if s not in columns]
    if missing:
        raise ValueError(f"unknown series {missing[0]!r}")
    path = Path(destination)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for name in series:
            y = np.asarray(columns[name], dtype=np.float64)
            if log_scale:
                y = np.where(y > 0, y, np.nan)
            # NaN points split the polyline
            (line,) = ax.plot(columns[x], y, label=name, linewidth=1.2)
            line.set_gid(series_gid(name))
        if log_scale:
            ax.set_yscale("log")
        ax.set_xlabel(x)
        if len(series) == 1:
            ax.set_ylabel(series[0])
        else:
            ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def compare_runs(runs: Mapping[str, Mapping[str, np.ndarray]], column: str, destination,
                 log_scale: bool = False, title: Optional[str] = None) -> Path:
    """One line per run for a shared column, e.g. default vs QuacK max logit."""
    path = Path(destination)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for label, cols in runs.items():
            y = np.asarray(cols[column], dtype=np.float64)
            if log_scale:
                y = np.where(y > 0, y, np.nan)
            (line,) = ax.plot(cols["step"], y, label=label, linewidth=1.2)
            line.set_gid(series_gid(label))
        if log_scale:
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel(column)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
