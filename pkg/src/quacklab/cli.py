"""Command line: train, sweep, lemma, plot, gradcheck.

Exit codes: 0 success, 1 usage error, 2 invalid configuration,
3 instability detected (train --strict), 4 a verification check failed
(lemma bound violated or gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import fnmatch
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, load_config
from .norms import NormKind

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_UNSTABLE, EXIT_CHECK = 0, 1, 2, 3, 4

log = logging.getLogger("quacklab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quacklab", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train one model and write metrics")
    _run_options(p)
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.add_argument("--strict", action="store_true", help="exit 3 if the run goes unstable")
    p.add_argument("--no-plots", action="store_true", help="skip the SVG plots")

    p = sub.add_parser("sweep", help="run a grid of configs and write a summary table")
    _run_options(p)
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.add_argument("--variants", default="mha,mla")
    p.add_argument("--interventions", default="none,quack,qk_norm,qk_clip,ablation")
    p.add_argument("--lrs", default="3e-4,3e-3,3e-2")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("lemma", help="check the logit-change bounds on random trials")
    p.add_argument("--trials", type=int, default=1000, help="trials per suite and norm")
    p.add_argument("--suite", choices=("mha", "mla", "both"), default="both")
    p.add_argument("--norm", choices=("frobenius", "spectral", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="lemma")

    p = sub.add_parser("plot", help="render columns of a metrics CSV to SVG")
    p.add_argument("csv", help="metrics CSV written by train")
    p.add_argument("--series", default="max_logit_*",
                   help="comma-separated column names or glob patterns")
    p.add_argument("--log", action="store_true", help="logarithmic y axis")
    p.add_argument("--title")
    p.add_argument("--out", default="plot.svg", help="SVG file to write")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the toy models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", default="mha,mla")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "out", None):
        cfg = cfg.replace(out_dir=args.out)
    return cfg.validate()


def _csv_list(text: str, kind=str) -> list:
    return [kind(x.strip()) for x in text.split(",") if x.strip()]


def _plot_run(rows, out: Path) -> list[Path]:
    from .telemetry import emit_plot_svg, rows_to_columns

    cols = rows_to_columns(rows)
    if len(cols["step"]) < 2:
        return []
    written = [emit_plot_svg(rows, ["loss"], out / "loss.svg")]
    for prefix in ("max_logit", "delta_logit"):
        names = [c for c in cols if c.startswith(prefix + "_")]
        if names:
            written.append(emit_plot_svg(rows, names, out / f"{prefix}.svg", log_scale=True))
    return written


def cmd_train(args) -> int:
    from .train import run_training, write_run

    cfg = _config(args)
    result = run_training(cfg)
    out = Path(cfg.out_dir)
    paths = write_run(result, out)
    if not args.no_plots:
        _plot_run(result.rows, out)
    last = result.rows[-1] if result.rows else None
    print(f"steps_done={result.steps_done} final_loss={result.final_loss:.6g} "
          f"unstable={'true' if result.unstable else 'false'} "
          f"seconds_per_step={result.seconds_per_step:.4g}")
    if last is not None:
        for head, value in sorted(last.max_logit.items()):
            print(f"max_logit L{head[0]} H{head[1]} = {value:.6g}")
    if result.unstable:
        print(f"instability: {result.reason}")
    print(f"metrics: {paths.get('metrics', '-')}")
    if result.unstable and args.strict:
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .plotting import compare_runs
    from .telemetry import read_columns
    from .train import build_grid, run_label, run_sweep

    base = _config(args)
    seeds = _csv_list(args.seeds, int) if args.seeds else None
    grid = build_grid(base, _csv_list(args.variants), _csv_list(args.interventions),
                      _csv_list(args.lrs, float), seeds)
    for cfg in grid:
        cfg.validate()
    out = Path(base.out_dir)
    rows = run_sweep(grid, out, workers=args.workers)
    for row in rows:
        print(f"{row['run']}: final_loss={row['final_loss']} unstable={row['unstable']}"
              + (f" error={row['error']}" if row["error"] else ""))
    tracked = None
    runs = {}
    for cfg in grid:
        metrics = out / run_label(cfg) / "metrics.csv"
        if metrics.exists():
            cols = read_columns(metrics)
            tracked = tracked or next((c for c in cols if c.startswith("max_logit_")), None)
            runs[run_label(cfg)] = cols
    if tracked and runs:
        compare_runs(runs, tracked, out / "max_logit.svg", log_scale=True)
    print(f"summary: {out / 'summary.csv'}")
    return EXIT_OK


def cmd_lemma(args) -> int:
    from .lemma import run_suite, summarize, write_trials_csv

    if args.trials < 1:
        raise ConfigError("--trials must be positive")
    suites = ("mha", "mla") if args.suite == "both" else (args.suite,)
    kinds = ([NormKind.FROBENIUS, NormKind.SPECTRAL] if args.norm == "both"
             else [NormKind(args.norm)])
    out = Path(args.out)
    failed = 0
    for suite in suites:
        trials = run_suite(suite, args.trials, args.seed, kinds)
        path = write_trials_csv(trials, out / f"lemma_{suite}.csv")
        for kind in kinds:
            s = summarize([t for t in trials if t.norm_kind == kind.value])
            failed += s["violations"]
            print(f"{suite} {kind.value}: trials={s['trials']} violations={s['violations']} "
                  f"ratio min/median/max={s['ratio_min']:.3g}/{s['ratio_median']:.3g}/"
                  f"{s['ratio_max']:.3g}")
            for norm, seed, terms in s["failed_seeds"]:
                print(f"  violated: seed={seed} terms={','.join(terms)}")
        print(f"trials: {path}")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_plot(args) -> int:
    from .telemetry import emit_plot_svg, read_columns

    cols = read_columns(args.csv)
    series = []
    for pattern in _csv_list(args.series):
        hits = [c for c in cols if fnmatch.fnmatchcase(c, pattern)] if any(
            ch in pattern for ch in "*?[") else [pattern]
        series += [h for h in hits if h not in series]
    if not series:
        raise ConfigError(f"no column matches {args.series!r}")
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    emit_plot_svg(args.csv, series, dest, log_scale=args.log, title=args.title)
    print(f"plot: {dest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_battery

    results = run_battery(args.seed, _csv_list(args.models))
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<24} rel_err={r.error:.3e} "
              f"({r.seconds:.2f}s)")
    bad = sum(not r.ok for r in results)
    print(f"{len(results) - bad}/{len(results)} within {TOLERANCE:g}")
    return EXIT_OK if bad == 0 else EXIT_CHECK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "lemma": cmd_lemma, "plot": cmd_plot,
            "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"quacklab {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
