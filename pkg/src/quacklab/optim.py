"""Muon for hidden matrices, Adam for everything else, and the LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor

NS_COEFFS = (3.4445, -4.7750, 2.0315)
ADAM_NAMES = ("embed", "unembed")


class ConfigurationError(ValueError):
    pass


class RoutingError(ValueError):
    pass


@dataclass
class Schedule:
    base_lr: float
    warmup_steps: int = 50

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")


def lr_at(sched: Schedule, step: int) -> float:
    """Linear warmup to base_lr over warmup_steps, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < sched.warmup_steps:
        return sched.base_lr * (step + 1) / sched.warmup_steps
    return sched.base_lr


def newton_schulz(g: np.ndarray, iters: int = 5, polish: int = 6) -> np.ndarray:
    """Approximate polar factor U V^T of g.

    ``iters`` quintic steps with the usual Muon coefficients pull the
    Frobenius-normalised singular values into roughly [0.7, 1.2]; ``polish``
    cubic steps x -> 1.5x - 0.5x^3 then contract them onto 1 from below,
    which keeps every output singular value at or under 1.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("newton_schulz expects a matrix")
    tall = g.shape[0] > g.shape[1]
    x = g.T if tall else g
    x = x / (np.linalg.norm(x) + 1e-12)
    a, b, c = NS_COEFFS
    for _ in range(iters):
        s = x @ x.T
        x = a * x + (b * s + c * s @ s) @ x
    for _ in range(polish):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
    return x.T if tall else x


@dataclass
class ParamState:
    kind: str
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    momentum: np.ndarray | None = None
    update_norm: float = 0.0


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    mu: float = 0.95
    nesterov: bool = True
    ns_iters: int = 5
    optimizer: str = "muon"
    params: dict[str, ParamState] = field(default_factory=dict)
    global_step: int = 0

    def for_param(self, name: str, kind: str) -> ParamState:
        if name not in self.params:
            self.params[name] = ParamState(kind)
        return self.params[name]


def route(name: str, array: np.ndarray, optimizer: str = "muon") -> str:
    """'muon' for 2-D hidden weights, 'adam' for embeddings, gains and everything
    when the run is configured as Adam-only."""
    if optimizer == "muon" and array.ndim == 2 and name not in ADAM_NAMES:
        return "muon"
    return "adam"


def muon_step(param: Tensor, grad: np.ndarray, state: ParamState, lr: float,
              opt: OptimState | None = None) -> Tensor:
    """param <- param - lr * NS(momentum-accumulated grad).

    The conditioned direction's Frobenius norm is kept in
    ``state.update_norm`` for bound checks.
    """
    opt = opt or OptimState()
    if param.ndim != 2:
        raise RoutingError(f"muon needs a 2-D weight, got shape {param.shape} "
                           f"for {param.name!r}; route it to adam")
    grad = np.asarray(grad, dtype=np.float64)
    if state.momentum is None:
        state.momentum = np.zeros_like(grad)
    state.momentum = opt.mu * state.momentum + grad
    direction = grad + opt.mu * state.momentum if opt.nesterov else state.momentum
    update = newton_schulz(direction, opt.ns_iters)
    state.update_norm = float(np.linalg.norm(update))
    state.step += 1
    param.data = (param.data - lr * update).astype(param.data.dtype)
    return param


def adam_step(param: Tensor, grad: np.ndarray, state: ParamState, lr: float,
              opt: OptimState | None = None) -> Tensor:
    """Bias-corrected Adam without weight decay."""
    opt = opt or OptimState()
    grad = np.asarray(grad, dtype=np.float64)
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    state.step += 1
    state.m = opt.beta1 * state.m + (1 - opt.beta1) * grad
    state.v = opt.beta2 * state.v + (1 - opt.beta2) * grad * grad
    m_hat = state.m / (1 - opt.beta1 ** state.step)
    v_hat = state.v / (1 - opt.beta2 ** state.step)
    update = m_hat / (np.sqrt(v_hat) + opt.eps)
    state.update_norm = float(np.linalg.norm(update))
    param.data = (param.data - lr * update).astype(param.data.dtype)
    return param


def apply_step(params, grads: Mapping[str, np.ndarray], lr_map: Mapping[str, float],
               state: OptimState):
    """One optimizer step over every parameter, each at its own learning rate.

    ``params`` is a ModelParams or any name -> Tensor mapping.  Parameters
    without a gradient are treated as having a zero gradient.
    """
    tensors = getattr(params, "tensors", params)
    missing = [n for n in tensors if n not in lr_map]
    if missing:
        raise ConfigurationError(f"no learning rate for parameter {missing[0]!r}")
    for name, param in tensors.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        kind = route(name, param.data, state.optimizer)
        ps = state.for_param(name, kind)
        step = muon_step if kind == "muon" else adam_step
        step(param, grad, ps, lr_map[name], state)
    state.global_step += 1
    return params


def conditioned_norms(state: OptimState) -> dict[str, float]:
    """Last recorded ||G|| per parameter (update direction before the lr)."""
    return {n: ps.update_norm for n, ps in state.params.items()}
