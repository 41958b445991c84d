"""Attention-logit interventions expressed as learning-rate maps or weight transforms.

QuacK sets each query/key learning rate inversely proportional to the norm
of its partner weight, anchored so every modulated rate starts at tau * eta.
The MLA form extends this to the six weight families that form logits.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attention import MhaWeights, MlaWeights
from .norms import NormKind, matrix_norm

MLA_FAMILIES = ("w_uq", "w_uk", "w_qr", "w_dq", "w_dkv", "w_kr")


class DegenerateWeightError(ValueError):
    pass


class InterventionKind(str, enum.Enum):
    NONE = "none"
    QUACK = "quack"
    QK_NORM = "qk_norm"
    QK_CLIP = "qk_clip"
    ABLATION = "ablation"


@dataclass
class LrPlan:
    """Init-time anchors for QuacK.

    ``init`` maps parameter name to its initial norm (MHA) or initial
    factor (MLA); ``current`` holds the most recent lr / (tau * eta).
    """

    variant: str
    tau: float
    norm_kind: NormKind
    init: dict[str, float]
    current: dict[str, float] = field(default_factory=dict)


@dataclass
class ClipState:
    tau_clip: float
    s_max: dict[tuple[int, int], float] = field(default_factory=dict)
    last_gamma: dict[tuple[int, int], float] = field(default_factory=dict)

    def observe(self, max_logits: Mapping[tuple[int, int], float]) -> None:
        for key, value in max_logits.items():
            self.s_max[key] = max(self.s_max.get(key, -math.inf), value)


def _layers(weights) -> list:
    if hasattr(weights, "attention") and hasattr(weights, "cfg"):
        return [weights.attention(l) for l in range(weights.cfg.n_layer)]
    if isinstance(weights, (MhaWeights, MlaWeights)):
        return [weights]
    return list(weights)


def _base_map(weights, eta: float) -> dict[str, float]:
    """eta for every parameter we can see: the whole model, or just the attention tensors."""
    if hasattr(weights, "tensors"):
        return {name: eta for name in weights.tensors}
    out = {}
    for w in _layers(weights):
        for value in vars(w).values():
            for t in value if isinstance(value, list) else [value]:
                if t is not None:
                    out[t.name] = eta
    return out


def _norm(t, kind: NormKind) -> float:
    n = matrix_norm(t.data, kind)
    if not n > 0 or not math.isfinite(n):
        raise DegenerateWeightError(f"weight {t.name!r} has norm {n}")
    return n


# ---------------------------------------------------------------------------
# QuacK, MHA


def quack_init_mha(weights, norm_kind: NormKind | str = NormKind.FROBENIUS,
                   tau: float = 1.0) -> LrPlan:
    kind = NormKind(norm_kind)
    init = {}
    for w in _layers(weights):
        for t in list(w.wq) + list(w.wk):
            init[t.name] = _norm(t, kind)
    return LrPlan("mha", tau, kind, init)


def quack_step_mha(weights, plan: LrPlan, tau: float, eta_sched: float) -> dict[str, float]:
    """lr(W_Q^h) = tau * eta * |W_K^h|_init / |W_K^h|_now, and symmetrically for W_K^h."""
    lrs = _base_map(weights, eta_sched)
    for w in _layers(weights):
        for wq, wk in zip(w.wq, w.wk):
            q_factor = plan.init[wk.name] / _norm(wk, plan.norm_kind)
            k_factor = plan.init[wq.name] / _norm(wq, plan.norm_kind)
            plan.current[wq.name] = q_factor
            plan.current[wk.name] = k_factor
            lrs[wq.name] = tau * eta_sched * q_factor
            lrs[wk.name] = tau * eta_sched * k_factor
    return lrs


# ---------------------------------------------------------------------------
# QuacK, MLA


def mla_lr_factors(weights, norm_kind: NormKind | str = NormKind.FROBENIUS) -> dict[str, float]:
    """Per-weight factors whose product with tau gives the bounded-change learning rates."""
    kind = NormKind(norm_kind)
    factors = {}
    for w in _layers(weights):
        dq, dkv, kr = _norm(w.w_dq, kind), _norm(w.w_dkv, kind), _norm(w.w_kr, kind)
        uq = [_norm(t, kind) for t in w.w_uq]
        uk = [_norm(t, kind) for t in w.w_uk]
        qr = [_norm(t, kind) for t in w.w_qr]
        for h in range(w.n_head):
            factors[w.w_uq[h].name] = 1.0 / (dq * uk[h] * dkv)
            factors[w.w_uk[h].name] = 1.0 / (uq[h] * dq * dkv)
            factors[w.w_qr[h].name] = 1.0 / (dq * kr)
        nope_q = max(uq[h] * uk[h] * dkv for h in range(w.n_head))
        rope_q = max(qr[h] * kr for h in range(w.n_head))
        factors[w.w_dq.name] = min(1.0 / nope_q, 1.0 / rope_q)
        factors[w.w_dkv.name] = 1.0 / max(uq[h] * dq * uk[h] for h in range(w.n_head))
        factors[w.w_kr.name] = 1.0 / max(qr[h] * dq for h in range(w.n_head))
    return factors


def quack_init_mla(weights, norm_kind: NormKind | str = NormKind.FROBENIUS,
                   tau: float = 1.0) -> LrPlan:
    kind = NormKind(norm_kind)
    return LrPlan("mla", tau, kind, mla_lr_factors(weights, kind))


def quack_step_mla(weights, plan: LrPlan, tau: float, eta_sched: float) -> dict[str, float]:
    """lr(W) = tau * eta * factor_now(W) / factor_init(W) for each logit-forming weight."""
    lrs = _base_map(weights, eta_sched)
    for name, factor in mla_lr_factors(weights, plan.norm_kind).items():
        ratio = factor / plan.init[name]
        plan.current[name] = ratio
        lrs[name] = tau * eta_sched * ratio
    return lrs


def quack_init(weights, variant: str, norm_kind=NormKind.FROBENIUS, tau: float = 1.0) -> LrPlan:
    init = quack_init_mha if variant == "mha" else quack_init_mla
    return init(weights, norm_kind, tau)


def quack_step(weights, plan: LrPlan, tau: float, eta_sched: float) -> dict[str, float]:
    step = quack_step_mha if plan.variant == "mha" else quack_step_mla
    return step(weights, plan, tau, eta_sched)


# ---------------------------------------------------------------------------
# ablation and QK clip


def logit_weight_names(weights) -> list[str]:
    """Names of the weights whose learning rates the interventions modulate."""
    names = []
    for w in _layers(weights):
        if isinstance(w, MhaWeights):
            names += [t.name for t in list(w.wq) + list(w.wk)]
        else:
            names += [t.name for t in list(w.w_uq) + list(w.w_uk) + list(w.w_qr)]
            names += [w.w_dq.name, w.w_dkv.name, w.w_kr.name]
    return names


def ablation_lrs(weights, tau: float, eta_sched: float, variant: str | None = None) -> dict[str, float]:
    """Fixed tau * eta on every logit-forming weight, eta elsewhere."""
    lrs = _base_map(weights, eta_sched)
    for name in logit_weight_names(weights):
        lrs[name] = tau * eta_sched
    return lrs


def clip_gamma(s_max: float, tau_clip: float) -> float:
    if not s_max > 0:
        return 1.0
    return min(1.0, tau_clip / s_max)


def _scale(t, factor: float) -> None:
    t.data = (t.data * factor).astype(t.data.dtype)


def qk_clip(weights, clip: ClipState) -> dict[tuple[int, int], float]:
    """Rescale each head whose observed max logit exceeded tau_clip.

    gamma = min(1, tau_clip / S_max).  MHA heads get sqrt(gamma) on W_Q and
    W_K; MLA heads get sqrt(gamma) on W_uq and W_uk and gamma on W_qr (the
    shared W_kr is left alone).  Running maxima are cleared afterwards.
    Returns the gamma applied per (layer, head).
    """
    applied = {}
    for layer, w in enumerate(_layers(weights)):
        for h in range(w.n_head):
            key = (layer, h)
            if key not in clip.s_max:
                continue
            gamma = clip_gamma(clip.s_max[key], clip.tau_clip)
            clip.last_gamma[key] = gamma
            applied[key] = gamma
            if gamma >= 1.0:
                continue
            root = math.sqrt(gamma)
            if isinstance(w, MhaWeights):
                _scale(w.wq[h], root)
                _scale(w.wk[h], root)
            else:
                _scale(w.w_uq[h], root)
                _scale(w.w_uk[h], root)
                _scale(w.w_qr[h], gamma)
    clip.s_max.clear()
    return applied


# ---------------------------------------------------------------------------
# run-level policy


@dataclass
class Intervention:
    kind: InterventionKind = InterventionKind.NONE
    tau: float = 1.0
    tau_clip: float = 100.0
    norm_kind: NormKind = NormKind.FROBENIUS


class Policy:
    """Binds an Intervention to a model for the duration of a run."""

    def __init__(self, spec: Intervention, params):
        self.spec = spec
        self.variant = params.cfg.attention.variant
        self.plan = None
        self.clip = None
        if spec.kind is InterventionKind.QUACK:
            self.plan = quack_init(params, self.variant, spec.norm_kind, spec.tau)
        elif spec.kind is InterventionKind.QK_CLIP:
            self.clip = ClipState(spec.tau_clip)

    def lr_map(self, params, eta: float) -> dict[str, float]:
        if self.spec.kind is InterventionKind.QUACK:
            return quack_step(params, self.plan, self.spec.tau, eta)
        if self.spec.kind is InterventionKind.ABLATION:
            return ablation_lrs(params, self.spec.tau, eta, self.variant)
        return {name: eta for name in params.tensors}

    def observe(self, max_logits) -> None:
        if self.clip is not None:
            self.clip.observe(max_logits)

    def after_step(self, params) -> dict[tuple[int, int], float]:
        if self.clip is None:
            return {}
        return qk_clip(params, self.clip)


def finite_positive(lrs: Mapping[str, float]) -> bool:
    vals = np.fromiter(lrs.values(), dtype=np.float64)
    return bool(np.all(np.isfinite(vals)) and np.all(vals > 0))
