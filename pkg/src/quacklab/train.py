"""Training loop wiring data, model, optimizer, intervention and telemetry."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .corpus import generate_corpus, sample_batch
from .interventions import Policy, logit_weight_names
from .model import ModelParams, init_params, loss_and_stats, save_checkpoint
from .optim import OptimState, apply_step, lr_at
from .telemetry import MetricsRow, ProbeState, emit_metrics_csv, fmt, probe_logit_stats
from .tensor import Tape, backward

log = logging.getLogger(__name__)


@dataclass
class StepInfo:
    """What a step hook sees, just before the optimizer update."""

    step: int
    params: ModelParams
    lrs: dict[str, float]
    eta: float
    grads: dict[str, np.ndarray]
    max_logits: dict[tuple[int, int], float]
    batch: np.ndarray
    policy: Policy
    opt: OptimState


@dataclass
class RunResult:
    config: RunConfig
    params: ModelParams
    rows: list[MetricsRow]
    unstable: bool = False
    reason: str = ""
    steps_done: int = 0
    seconds_per_step: float = 0.0
    clip_events: list[tuple[int, dict]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss if self.rows else math.nan


def tracked_lr_names(params: ModelParams, tracked) -> list[str]:
    """Logit-forming weights that belong to the tracked heads (plus their shared matrices)."""
    names = []
    for layer in sorted({l for l, _ in tracked}):
        heads = [h for l, h in tracked if l == layer]
        attn = params.attention(layer)
        for name in logit_weight_names(attn):
            parts = name.split(".")
            if parts[-1].isdigit() and int(parts[-1]) not in heads:
                continue
            names.append(name)
    return names


def run_training(cfg: RunConfig, step_hook: Optional[Callable[[StepInfo], None]] = None,
                 after_update: Optional[Callable[[StepInfo, dict], None]] = None
                 ) -> RunResult:
    """Train one model; see RunConfig for the knobs.

    Per step: batch, loss, backward, intervention lr map, optimizer update,
    then QK clip (if active) using the max logits seen on that step.  A
    telemetry row is taken every ``probe_interval`` steps from the
    pre-update parameters.  Non-finite loss or a tracked max logit above
    ``max_logit_ceiling`` ends the run with ``unstable`` set.
    """
    cfg.validate()
    corpus = generate_corpus(cfg.corpus_spec())
    params = init_params(cfg.model_config(), cfg.seed)
    batch_rng = np.random.default_rng([cfg.seed, 10])
    probe_rng = np.random.default_rng([cfg.seed, 11])
    tracked = cfg.tracked()
    probe = ProbeState(sample_batch(corpus, probe_rng, cfg.probe_batch_size,
                                    min(cfg.seq_len, cfg.context_length)), tracked)
    policy = Policy(cfg.intervention_spec(), params)
    opt = cfg.optim_state()
    sched = cfg.schedule()
    lr_names = tracked_lr_names(params, tracked)
    result = RunResult(cfg, params, [])
    started = time.perf_counter()

    for step in range(cfg.steps):
        batch = sample_batch(corpus, batch_rng, cfg.batch_size, cfg.seq_len)
        with Tape():
            loss, max_logits = loss_and_stats(params, batch)
        loss_value = float(loss.data)
        eta = lr_at(sched, step)
        probing = cfg.probe_interval and step % cfg.probe_interval == 0
        if not math.isfinite(loss_value):
            result.rows.append(_unstable_row(step, loss_value, eta, params, lr_names, tracked))
            result.unstable, result.reason = True, f"non-finite loss at step {step}"
            break
        grads = backward(loss)
        policy.observe(max_logits)
        lrs = policy.lr_map(params, eta)
        if probing:
            maxes, deltas = probe_logit_stats(params, probe)
            row = MetricsRow(step, loss_value, eta, {n: lrs[n] for n in lr_names},
                             maxes, deltas or {})
            result.rows.append(row)
            over = [h for h, v in maxes.items() if not v <= cfg.max_logit_ceiling]
            if over:
                result.unstable = True
                result.reason = f"max logit above ceiling at step {step} for head {over[0]}"
                break
        info = StepInfo(step, params, lrs, eta, grads, max_logits, batch, policy, opt)
        if step_hook is not None:
            step_hook(info)
        apply_step(params, grads, lrs, opt)
        gammas = policy.after_step(params)
        if any(g < 1.0 for g in gammas.values()):
            result.clip_events.append((step, gammas))
        if after_update is not None:
            after_update(info, gammas)
        result.steps_done = step + 1

    elapsed = time.perf_counter() - started
    result.seconds_per_step = elapsed / max(result.steps_done, 1)
    log.info("run %s/%s lr=%g finished %d steps, unstable=%s", cfg.variant, cfg.intervention,
             cfg.base_lr, result.steps_done, result.unstable)
    return result


def _unstable_row(step, loss_value, eta, params, lr_names, tracked) -> MetricsRow:
    nan = math.nan
    return MetricsRow(step, loss_value, eta, {n: nan for n in lr_names},
                      {h: nan for h in tracked}, {h: nan for h in tracked})


def write_run(result: RunResult, out_dir, stem: str = "metrics") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    (out / "config.txt").write_text(result.config.to_text())
    paths["config"] = out / "config.txt"
    if result.rows:
        paths["metrics"] = emit_metrics_csv(result.rows, out / f"{stem}.csv",
                                            probe_interval=result.config.probe_interval)
    if result.config.checkpoint:
        paths["checkpoint"] = out / "checkpoint.npz"
        save_checkpoint(paths["checkpoint"], result.params, steps=result.steps_done)
    return paths


# ---------------------------------------------------------------------------
# sweeps

SUMMARY_COLUMNS = ["run", "variant", "intervention", "tau", "tau_clip", "norm_kind", "base_lr",
                   "seed", "steps_done", "final_loss", "final_max_logit", "unstable",
                   "seconds_per_step", "error"]


def run_label(cfg: RunConfig) -> str:
    parts = [cfg.variant, cfg.intervention]
    if cfg.intervention in ("quack", "ablation"):
        parts.append(f"tau{cfg.tau:g}")
    if cfg.intervention == "qk_clip":
        parts.append(f"clip{cfg.tau_clip:g}")
    parts += [f"lr{cfg.base_lr:g}", f"seed{cfg.seed}"]
    return "_".join(parts)


def _summary_row(cfg: RunConfig, result: Optional[RunResult], error: str = "") -> dict:
    row = {"run": run_label(cfg), "variant": cfg.variant, "intervention": cfg.intervention,
           "tau": fmt(cfg.tau), "tau_clip": fmt(cfg.tau_clip), "norm_kind": cfg.norm_kind,
           "base_lr": fmt(cfg.base_lr), "seed": cfg.seed, "error": error}
    if result is None:
        row.update(steps_done=0, final_loss="nan", final_max_logit="nan", unstable="true",
                   seconds_per_step="nan")
        return row
    last = result.rows[-1] if result.rows else None
    max_logit = max(last.max_logit.values()) if last and last.max_logit else math.nan
    row.update(steps_done=result.steps_done, final_loss=fmt(result.final_loss),
               final_max_logit=fmt(max_logit), unstable="true" if result.unstable else "false",
               seconds_per_step=fmt(result.seconds_per_step))
    return row


def _run_one(cfg: RunConfig, out_dir: Optional[str]) -> dict:
    try:
        result = run_training(cfg)
    except Exception as exc:  # one failing run must not sink the sweep
        log.error("run %s failed: %s", run_label(cfg), exc)
        return _summary_row(cfg, None, f"{type(exc).__name__}: {exc}".replace("\n", " "))
    if out_dir is not None:
        write_run(result, Path(out_dir) / run_label(cfg))
    return _summary_row(cfg, result)


def run_sweep(grid: Sequence[RunConfig], out_dir=None, workers: int = 1) -> list[dict]:
    """Run every config and collate one summary row each, in grid order."""
    if not grid:
        raise ValueError("sweep grid is empty")
    target = None if out_dir is None else str(out_dir)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_one, grid, [target] * len(grid)))
    else:
        rows = [_run_one(cfg, target) for cfg in grid]
    if out_dir is not None:
        write_summary(rows, Path(out_dir) / "summary.csv")
    return rows


def write_summary(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def build_grid(base: RunConfig, variants=("mha", "mla"),
               interventions=("none", "quack", "qk_norm", "qk_clip", "ablation"),
               base_lrs=(3e-4, 3e-3, 3e-2), seeds: Sequence[int] | None = None
               ) -> list[RunConfig]:
    seeds = [base.seed] if seeds is None else list(seeds)
    return [base.replace(variant=v, intervention=i, base_lr=lr, seed=s)
            for v in variants for i in interventions for lr in base_lrs for s in seeds]
