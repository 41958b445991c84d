"""Probe-batch logit statistics and the metrics CSV format."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import ModelParams, forward

Head = tuple[int, int]
_HEAD_COL = re.compile(r"^(max_logit|delta_logit)_L(\d+)_H(\d+)$")


def fmt(x: float) -> str:
    """17 significant digits: enough for an exact float64 round trip."""
    return format(float(x), ".17g")


def head_label(head: Head) -> str:
    return f"L{head[0]}_H{head[1]}"


def middle_head(n_layer: int, n_head: int) -> Head:
    return (n_layer // 2, n_head // 2)


@dataclass
class ProbeState:
    batch: np.ndarray
    tracked: list[Head]
    previous: dict[Head, np.ndarray] = field(default_factory=dict)


@dataclass
class MetricsRow:
    step: int
    loss: float
    base_lr: float
    lrs: dict[str, float] = field(default_factory=dict)
    max_logit: dict[Head, float] = field(default_factory=dict)
    delta_logit: dict[Head, float] = field(default_factory=dict)


def probe_logit_stats(params: ModelParams, probe: ProbeState
                      ) -> tuple[dict[Head, float], Optional[dict[Head, float]]]:
    """Max logit and mean |change| since the last probe for each tracked head.

    Runs outside any tape, so training state is untouched.  The change is
    averaged over visible (unmasked) entries; on the first call it is None.
    """
    captured: dict[Head, np.ndarray] = {}
    forward(params, probe.batch, attn_logits=captured)
    maxes, deltas = {}, {}
    first = not probe.previous
    for head in probe.tracked:
        cur = captured[head]
        maxes[head] = float(np.nanmax(cur))
        if not first:
            diff = np.abs(cur - probe.previous[head])
            deltas[head] = float(np.nanmean(diff))
        probe.previous[head] = cur
    return maxes, (None if first else deltas)


# ---------------------------------------------------------------------------
# CSV


def _columns(row: MetricsRow) -> list[str]:
    cols = ["step", "loss", "base_lr"]
    cols += [f"lr_{n}" for n in row.lrs]
    cols += [f"max_logit_{head_label(h)}" for h in row.max_logit]
    cols += [f"delta_logit_{head_label(h)}" for h in row.max_logit]
    return cols


def emit_metrics_csv(rows: Sequence[MetricsRow], destination,
                     probe_interval: Optional[int] = None) -> Path:
    """Header plus one line per row.

    When ``probe_interval`` is given it is written first as a ``#`` comment
    line, which :func:`parse_metrics_csv` skips.
    """
    if not rows:
        raise ValueError("no metrics rows to write")
    path = Path(destination)
    cols = _columns(rows[0])
    with open(path, "w", newline="") as fh:
        if probe_interval is not None:
            fh.write(f"# probe_interval={probe_interval}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            line = [str(r.step), fmt(r.loss), fmt(r.base_lr)]
            line += [fmt(v) for v in r.lrs.values()]
            line += [fmt(r.max_logit[h]) for h in r.max_logit]
            line += [fmt(r.delta_logit.get(h, math.nan)) for h in r.max_logit]
            writer.writerow(line)
    return path


def _data_lines(path) -> Iterable[str]:
    with open(path, newline="") as fh:
        for line in fh:
            if not line.startswith("#"):
                yield line


def parse_metrics_csv(path) -> list[MetricsRow]:
    reader = csv.reader(_data_lines(path))
    header = next(reader)
    rows = []
    for values in reader:
        rec = dict(zip(header, values))
        row = MetricsRow(int(rec["step"]), float(rec["loss"]), float(rec["base_lr"]))
        for col, val in rec.items():
            if col.startswith("lr_"):
                row.lrs[col[3:]] = float(val)
                continue
            m = _HEAD_COL.match(col)
            if m:
                head = (int(m.group(2)), int(m.group(3)))
                target = row.max_logit if m.group(1) == "max_logit" else row.delta_logit
                target[head] = float(val)
        rows.append(row)
    return rows


def read_columns(path) -> dict[str, np.ndarray]:
    """Column name -> float array, for plotting and summaries."""
    reader = csv.reader(_data_lines(path))
    header = next(reader)
    data = [[float(v) for v in line] for line in reader]
    arr = np.array(data, dtype=np.float64).reshape(len(data), len(header))
    return {name: arr[:, i] for i, name in enumerate(header)}


def rows_to_columns(rows: Sequence[MetricsRow]) -> dict[str, np.ndarray]:
    cols: dict[str, list[float]] = {"step": [], "loss": [], "base_lr": []}
    for r in rows:
        cols["step"].append(r.step)
        cols["loss"].append(r.loss)
        cols["base_lr"].append(r.base_lr)
        for n, v in r.lrs.items():
            cols.setdefault(f"lr_{n}", []).append(v)
        for h, v in r.max_logit.items():
            cols.setdefault(f"max_logit_{head_label(h)}", []).append(v)
            cols.setdefault(f"delta_logit_{head_label(h)}", []).append(
                r.delta_logit.get(h, math.nan))
    return {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}


def rows_equal(a: Sequence[MetricsRow], b: Sequence[MetricsRow]) -> bool:
    """Exact equality with NaN == NaN."""

    def same(x, y):
        return (math.isnan(x) and math.isnan(y)) or x == y

    if len(a) != len(b):
        return False
    for r, s in zip(a, b):
        if r.step != s.step or not same(r.loss, s.loss) or not same(r.base_lr, s.base_lr):
            return False
        for da, db in ((r.lrs, s.lrs), (r.max_logit, s.max_logit)):
            if da.keys() != db.keys() or not all(same(da[k], db[k]) for k in da):
                return False
        for h in r.max_logit:
            if not same(r.delta_logit.get(h, math.nan), s.delta_logit.get(h, math.nan)):
                return False
    return True


def emit_plot_svg(rows, series: Sequence[str], destination, log_scale: bool = False,
                  title: Optional[str] = None) -> Path:
    """Render selected columns against step into a deterministic SVG."""
    from .plotting import plot_series

    if not series:
        raise ValueError("select at least one series to plot")
    cols = read_columns(rows) if isinstance(rows, (str, Path)) else rows_to_columns(rows)
    if len(cols["step"]) < 2:
        raise ValueError("need at least two rows to plot")
    return plot_series(cols, series, destination, log_scale=log_scale, title=title)
