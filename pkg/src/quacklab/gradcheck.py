"""Finite-difference battery over every differentiable op and the toy models."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig
from .model import ModelConfig, forward_loss, init_params
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, Sequence[np.ndarray]]]:
    def r(*shape):
        return rng.standard_normal(shape)

    w = r(3, 4)
    mask = np.tril(np.ones((4, 4), dtype=bool))
    ids = np.array([[1, 3, 0], [2, 2, 4]])
    targets = np.array([0, 2, 1])

    weights = {}

    def proj(t):
        # a fixed random weighting per output shape, so no gradient is uniform
        if t.shape not in weights:
            weights[t.shape] = np.random.default_rng(len(weights) + 7).standard_normal(t.shape)
        return T.tsum(t * Tensor(weights[t.shape]))

    return [
        ("add", lambda a, b: proj(a + b), [r(3, 4), r(4)]),
        ("sub", lambda a, b: proj(a - b), [r(3, 4), r(3, 1)]),
        ("mul", lambda a, b: proj(a * b), [r(3, 4), r(3, 4)]),
        ("div", lambda a, b: proj(a / b), [r(3, 4), 2.0 + rng.random((3, 4))]),
        ("matmul", lambda a, b: proj(a @ b), [r(3, 5), r(5, 4)]),
        ("batched_matmul", lambda a, b: proj(a @ b), [r(2, 3, 5), r(2, 5, 4)]),
        ("transpose", lambda a: proj(a.T @ Tensor(w)), [r(3, 5)]),
        ("reshape", lambda a: proj(T.reshape(a, (4, 3))), [r(3, 4)]),
        ("concat", lambda a, b: proj(T.concat([a, b], axis=-1)), [r(3, 2), r(3, 3)]),
        ("sum", lambda a: proj(T.tsum(a, axis=0)), [r(3, 4)]),
        ("mean", lambda a: proj(T.mean(a, axis=1, keepdims=True)), [r(3, 4)]),
        ("silu", lambda a: proj(T.silu(a)), [r(3, 4)]),
        ("embedding", lambda e: proj(T.embedding(e, ids)), [r(5, 4)]),
        ("softmax", lambda a: proj(T.softmax_rows(a)), [r(3, 4)]),
        ("masked_softmax", lambda a: proj(T.softmax_rows(a, mask)), [r(4, 4)]),
        ("rms_norm", lambda a, g: proj(T.rms_norm(a, g)), [r(3, 4), 1.0 + 0.1 * r(4)]),
        ("rope", lambda a: proj(T.rope_apply(a, np.arange(3.0))), [r(3, 4)]),
        ("cross_entropy", lambda a: T.cross_entropy(a, targets), [r(3, 5)]),
    ]


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, f, inputs in _op_cases(rng):
        start = time.perf_counter()
        err = grad_check(f, inputs)
        out.append(CheckResult(f"op:{name}", err, time.perf_counter() - start))
    return out


def toy_model_config(variant: str, qk_norm: bool = False) -> ModelConfig:
    """A 2-layer model small enough to difference every parameter element."""
    attn = AttentionConfig(variant=variant, d_model=16, n_head=2, d_head=8, d_nope=4,
                           d_rope=4, d_cq=8, d_ckv=8, qk_norm_enabled=qk_norm)
    return ModelConfig(vocab_size=11, d_model=16, d_ff=16, n_layer=2, context_length=8,
                       attention=attn, embed_std=0.5)


def check_model(variant: str, seed: int = 0, qk_norm: bool = False) -> CheckResult:
    """Worst relative error over every parameter of the toy model's loss."""
    cfg = toy_model_config(variant, qk_norm)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 5])
    batch = rng.integers(0, cfg.vocab_size, size=(2, 7))
    names = list(params.tensors)

    def loss(*leaves):
        trial = params.copy()
        for name, leaf in zip(names, leaves):
            trial.tensors[name] = leaf
        return forward_loss(trial, batch)

    start = time.perf_counter()
    err = grad_check(loss, [params.tensors[n].data for n in names])
    label = f"model:{variant}" + ("+qk_norm" if qk_norm else "")
    return CheckResult(label, err, time.perf_counter() - start)


def run_battery(seed: int = 0, models: Sequence[str] = ("mha", "mla")) -> list[CheckResult]:
    results = check_ops(seed)
    for variant in models:
        results.append(check_model(variant, seed))
    return results
