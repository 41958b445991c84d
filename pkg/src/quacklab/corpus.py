"""Deterministic synthetic token streams."""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

DELIMITER = 0


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    vocab_size: int = 256
    kind: str = "copy"
    length: int = 200_000
    seed: int = 0
    order: int = 1
    concentration: float = 0.5
    min_segment: int = 4
    max_segment: int = 16

    def __post_init__(self):
        if self.kind not in ("copy", "markov"):
            raise ValueError(f"unknown corpus kind {self.kind!r}")
        if self.vocab_size < 2 or self.length < 1:
            raise ValueError("vocab_size must be >= 2 and length >= 1")
        if not 1 <= self.min_segment <= self.max_segment:
            raise ValueError("need 1 <= min_segment <= max_segment")
        if self.order < 1 or self.vocab_size ** (self.order + 1) > 2 ** 26:
            raise ValueError("markov order must be >= 1 and its table must fit in memory")


def transition_table(spec: SyntheticCorpusSpec) -> np.ndarray:
    """Row-stochastic (vocab**order, vocab) table drawn from a Dirichlet."""
    rng = np.random.default_rng([spec.seed, 1])
    rows = spec.vocab_size ** spec.order
    return rng.dirichlet(np.full(spec.vocab_size, spec.concentration), size=rows)


def _markov(spec: SyntheticCorpusSpec) -> np.ndarray:
    table = transition_table(spec)
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    cdf_rows = cdf.tolist()
    rng = np.random.default_rng([spec.seed, 2])
    v, k = spec.vocab_size, spec.order
    out = np.empty(spec.length, dtype=np.int64)
    out[:k] = rng.integers(0, v, size=min(k, spec.length))
    u = rng.random(spec.length).tolist()
    state = 0
    for t in range(min(k, spec.length)):
        state = (state * v + int(out[t])) % (v ** k)
    modulus = v ** k
    for t in range(k, spec.length):
        tok = bisect.bisect_right(cdf_rows[state], u[t])
        tok = min(tok, v - 1)
        out[t] = tok
        state = (state * v + tok) % modulus
    return out


def _copy(spec: SyntheticCorpusSpec) -> np.ndarray:
    """segment, DELIM, same segment, DELIM, next segment, ..."""
    rng = np.random.default_rng([spec.seed, 3])
    pieces = []
    total = 0
    while total < spec.length:
        n = int(rng.integers(spec.min_segment, spec.max_segment + 1))
        seg = rng.integers(1, spec.vocab_size, size=n)
        block = np.concatenate([seg, [DELIMITER], seg, [DELIMITER]])
        pieces.append(block)
        total += block.size
    return np.concatenate(pieces)[: spec.length].astype(np.int64)


def generate_corpus(spec: SyntheticCorpusSpec) -> np.ndarray:
    return _markov(spec) if spec.kind == "markov" else _copy(spec)


def sample_batch(corpus: np.ndarray, rng: np.random.Generator, batch_size: int,
                 seq_len: int) -> np.ndarray:
    """batch_size random windows of seq_len tokens."""
    if seq_len > corpus.size:
        raise ValueError("corpus shorter than one window")
    starts = rng.integers(0, corpus.size - seq_len + 1, size=batch_size)
    return np.stack([corpus[s:s + seq_len] for s in starts])
