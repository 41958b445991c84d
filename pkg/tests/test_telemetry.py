import math
import re

import numpy as np
import pytest

from quacklab.model import init_params
from quacklab.telemetry import (MetricsRow, ProbeState, emit_metrics_csv, emit_plot_svg,
                                head_label, middle_head, parse_metrics_csv, probe_logit_stats,
                                read_columns, rows_equal, rows_to_columns)

from conftest import small_model_config


def sample_rows(n=6, nan_at=None):
    rows = []
    for i in range(n):
        loss = math.nan if i == nan_at else 5.0 / (i + 1) + 1e-17 * i
        rows.append(MetricsRow(10 * i, loss, 0.03 * min(1, (i + 1) / 3),
                               {"layers.1.attn.wq.2": 0.003 / (i + 1)},
                               {(1, 2): 1.5 * i + 0.1}, {} if i == 0 else {(1, 2): 0.1 * i}))
    return rows


def test_csv_round_trip_is_exact(tmp_path):
    rows = sample_rows(nan_at=3)
    path = emit_metrics_csv(rows, tmp_path / "m.csv", probe_interval=10)
    back = parse_metrics_csv(path)
    assert rows_equal(rows, back)
    assert math.isnan(back[0].delta_logit[(1, 2)])
    assert path.read_text().splitlines()[0] == "# probe_interval=10"


def test_csv_columns(tmp_path):
    path = emit_metrics_csv(sample_rows(), tmp_path / "m.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["step", "loss", "base_lr", "lr_layers.1.attn.wq.2", "max_logit_L1_H2",
                      "delta_logit_L1_H2"]
    cols = read_columns(path)
    np.testing.assert_array_equal(cols["step"], [0, 10, 20, 30, 40, 50])


def test_empty_rows_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_metrics_csv([], tmp_path / "m.csv")


def test_helpers():
    assert head_label((1, 2)) == "L1_H2"
    assert middle_head(2, 4) == (1, 2)


def test_probe_stats_first_call_has_no_delta(rng):
    cfg = small_model_config()
    params = init_params(cfg, 0)
    probe = ProbeState(rng.integers(0, cfg.vocab_size, size=(2, 6)), [(0, 1), (1, 0)])
    maxes, deltas = probe_logit_stats(params, probe)
    assert deltas is None and set(maxes) == {(0, 1), (1, 0)}
    maxes2, deltas2 = probe_logit_stats(params, probe)
    assert maxes2 == maxes and all(v == 0.0 for v in deltas2.values())
    params["layers.0.attn.wq.1"].data *= 2
    _, deltas3 = probe_logit_stats(params, probe)
    assert deltas3[(0, 1)] > 0 and deltas3[(1, 0)] >= 0


def svg_paths(svg: str, gid: str) -> list[str]:
    group = re.search(rf'<g id="{gid}">(.*?)</g>', svg, re.S)
    assert group, gid
    return re.findall(r' d="([^"]+)"', group.group(1))


def points(d: str) -> list[list[tuple[float, float]]]:
    runs, cur = [], []
    for cmd, x, y in re.findall(r"([ML])\s*(-?[\d.]+)\s+(-?[\d.]+)", d):
        if cmd == "M" and cur:
            runs.append(cur)
            cur = []
        cur.append((float(x), float(y)))
    return runs + [cur]


def test_svg_is_deterministic(tmp_path):
    rows = sample_rows()
    a = emit_plot_svg(rows, ["loss", "max_logit_L1_H2"], tmp_path / "a.svg")
    b = emit_plot_svg(rows, ["loss", "max_logit_L1_H2"], tmp_path / "b.svg")
    assert a.read_bytes() == b.read_bytes()


def test_svg_polyline_follows_data(tmp_path):
    rows = sample_rows()
    svg = emit_plot_svg(rows, ["max_logit_L1_H2"], tmp_path / "p.svg").read_text()
    (run,) = points(svg_paths(svg, "series-max_logit_L1_H2")[0])
    xs, ys = [p[0] for p in run], [p[1] for p in run]
    assert len(run) == len(rows)
    assert all(a < b for a, b in zip(xs, xs[1:]))
    # data increases, SVG y grows downward
    assert all(a > b for a, b in zip(ys, ys[1:]))


def test_svg_nan_breaks_the_line(tmp_path):
    svg = emit_plot_svg(sample_rows(nan_at=3), ["loss"], tmp_path / "n.svg").read_text()
    runs = points(svg_paths(svg, "series-loss")[0])
    assert [len(r) for r in runs] == [3, 2]


def test_svg_log_scale_drops_nonpositive(tmp_path):
    rows = sample_rows()
    rows[2].max_logit[(1, 2)] = -1.0
    svg = emit_plot_svg(rows, ["max_logit_L1_H2"], tmp_path / "l.svg", log_scale=True)
    runs = points(svg_paths(svg.read_text(), "series-max_logit_L1_H2")[0])
    assert sum(len(r) for r in runs) == len(rows) - 1


def test_plot_input_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_plot_svg(sample_rows(), ["nope"], tmp_path / "x.svg")
    with pytest.raises(ValueError):
        emit_plot_svg(sample_rows(1), ["loss"], tmp_path / "x.svg")
    with pytest.raises(ValueError):
        emit_plot_svg(sample_rows(), [], tmp_path / "x.svg")


def test_rows_to_columns_matches_csv(tmp_path):
    rows = sample_rows()
    path = emit_metrics_csv(rows, tmp_path / "m.csv")
    a, b = rows_to_columns(rows), read_columns(path)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
