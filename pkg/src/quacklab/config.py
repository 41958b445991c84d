"""Run configuration and its flat ``key = value`` file format.

One setting per line, ``#`` starts a comment.  Values are typed by the
field they set; unknown keys are errors.  Example::

    variant = mla
    intervention = quack
    tau = 0.1
    base_lr = 3e-2
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .attention import AttentionConfig
from .corpus import SyntheticCorpusSpec
from .interventions import Intervention, InterventionKind
from .model import ModelConfig
from .norms import NormKind
from .optim import OptimState, Schedule
from .telemetry import Head, middle_head


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    variant: str = "mha"
    vocab_size: int = 256
    d_model: int = 64
    d_ff: int = 0
    n_layer: int = 2
    n_head: int = 4
    d_head: int = 16
    d_nope: int = 8
    d_rope: int = 8
    d_cq: int = 32
    d_ckv: int = 16
    context_length: int = 64
    tie_embeddings: bool = True
    rope: bool = True
    precision: str = "double"
    # intervention
    intervention: str = "none"
    tau: float = 0.1
    tau_clip: float = 100.0
    norm_kind: str = "frobenius"
    # optimisation
    optimizer: str = "muon"
    base_lr: float = 3e-2
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    momentum: float = 0.95
    ns_iters: int = 5
    # run
    steps: int = 500
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    corpus: str = "copy"
    corpus_length: int = 200_000
    corpus_seed: int = 1234
    probe_interval: int = 10
    probe_batch_size: int = 4
    tracked_heads: str = "middle"
    max_logit_ceiling: float = math.inf
    checkpoint: bool = False
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        problems = []
        if self.optimizer not in ("muon", "adam"):
            problems.append(f"optimizer must be muon or adam, not {self.optimizer!r}")
        if self.variant not in ("mha", "mla"):
            problems.append(f"variant must be mha or mla, not {self.variant!r}")
        try:
            InterventionKind(self.intervention)
        except ValueError:
            problems.append(f"unknown intervention {self.intervention!r}")
        try:
            NormKind(self.norm_kind)
        except ValueError:
            problems.append(f"unknown norm_kind {self.norm_kind!r}")
        if self.seq_len > self.context_length + 1:
            problems.append("seq_len may exceed context_length by at most one token")
        if self.seq_len < 2:
            problems.append("seq_len must be at least 2")
        for name in ("steps", "batch_size", "base_lr", "tau", "tau_clip", "probe_batch_size"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.probe_interval < 0 or self.warmup_steps < 0:
            problems.append("probe_interval and warmup_steps must be non-negative")
        if self.corpus_length < self.seq_len:
            problems.append("corpus_length must cover at least one window")
        try:
            self.model_config()
            self.tracked()
        except (ValueError, KeyError) as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def model_config(self) -> ModelConfig:
        attn = AttentionConfig(
            variant=self.variant, d_model=self.d_model, n_head=self.n_head,
            d_head=(self.d_nope + self.d_rope) if self.variant == "mla" else self.d_head,
            d_nope=self.d_nope, d_rope=self.d_rope, d_cq=self.d_cq, d_ckv=self.d_ckv,
            qk_norm_enabled=self.intervention == InterventionKind.QK_NORM.value,
            rope=self.rope,
        )
        return ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model,
                           d_ff=self.d_ff or None, n_layer=self.n_layer,
                           context_length=self.context_length, attention=attn,
                           tie_embeddings=self.tie_embeddings, precision=self.precision)

    def intervention_spec(self) -> Intervention:
        return Intervention(InterventionKind(self.intervention), self.tau, self.tau_clip,
                            NormKind(self.norm_kind))

    def schedule(self) -> Schedule:
        return Schedule(self.base_lr, self.warmup_steps)

    def optim_state(self) -> OptimState:
        return OptimState(beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps,
                          mu=self.momentum, ns_iters=self.ns_iters, optimizer=self.optimizer)

    def corpus_spec(self) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(vocab_size=self.vocab_size, kind=self.corpus,
                                   length=self.corpus_length, seed=self.corpus_seed)

    def tracked(self) -> list[Head]:
        spec = self.tracked_heads.strip()
        if spec == "middle":
            return [middle_head(self.n_layer, self.n_head)]
        if spec == "all":
            return [(l, h) for l in range(self.n_layer) for h in range(self.n_head)]
        heads = []
        for item in spec.split(","):
            item = item.strip().upper()
            if not item.startswith("L") or "H" not in item:
                raise ValueError(f"bad tracked head {item!r}; use e.g. L1H2")
            layer, head = item[1:].split("H")
            heads.append((int(layer), int(head)))
            if not (0 <= heads[-1][0] < self.n_layer and 0 <= heads[-1][1] < self.n_head):
                raise ValueError(f"tracked head {item} out of range")
        return heads

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n"
                       for f in dataclasses.fields(self))


_TYPES = typing.get_type_hints(RunConfig)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


def parse_assignments(lines: Iterable[str], base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _coerce(key, raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    base = RunConfig()
    if path is not None:
        base = parse_assignments(Path(path).read_text().splitlines(), base)
    return parse_assignments(overrides, base)
