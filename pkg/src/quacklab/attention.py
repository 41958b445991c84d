"""Multi-head and multi-head latent attention with per-head weights.

All matrices use the row-vector convention: a token is a row ``x`` and a
projection is ``x @ W``.  Weights are stored one matrix per head so the
learning-rate rules and QK clip can address each head directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

MASKED = np.nan


@dataclass
class AttentionConfig:
    variant: str = "mha"
    d_model: int = 64
    n_head: int = 4
    d_head: int = 16
    d_nope: int = 8
    d_rope: int = 8
    d_cq: int = 32
    d_ckv: int = 16
    qk_norm_enabled: bool = False
    causal: bool = True
    track_max_logit: bool = True
    rope: bool = True
    theta_base: float = 10000.0
    # QK norm only; small enough that normalised rows have RMS 1 to ~1e-14
    norm_eps: float = 1e-20

    def __post_init__(self):
        if self.variant not in ("mha", "mla"):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        for field in ("d_model", "n_head", "d_head", "d_nope", "d_rope", "d_cq", "d_ckv"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.variant == "mla":
            if self.d_head != self.d_nope + self.d_rope:
                raise ValueError("mla requires d_head == d_nope + d_rope")
            if self.d_cq > self.d_model or self.d_ckv > self.d_model:
                raise ValueError("mla latent widths must not exceed d_model")
            if self.d_rope % 2:
                raise ValueError("d_rope must be even")
        elif self.rope and self.d_head % 2:
            raise ValueError("rotary mha needs an even d_head")

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d_head)


@dataclass
class MhaWeights:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor
    q_gain: Optional[list[Tensor]] = None
    k_gain: Optional[list[Tensor]] = None

    @property
    def n_head(self) -> int:
        return len(self.wq)


@dataclass
class MlaWeights:
    w_dq: Tensor
    w_dkv: Tensor
    w_kr: Tensor
    w_uq: list[Tensor]
    w_qr: list[Tensor]
    w_uk: list[Tensor]
    w_uv: list[Tensor]
    wo: Tensor
    q_gain: Optional[list[Tensor]] = None
    k_gain: Optional[list[Tensor]] = None

    @property
    def n_head(self) -> int:
        return len(self.w_uq)


def causal_mask(s: int, t: Optional[int] = None) -> np.ndarray:
    """Boolean (s, t) mask, True where query i may attend to key j <= i."""
    t = s if t is None else t
    return np.tril(np.ones((s, t), dtype=bool))


def _positions(n: int, given) -> np.ndarray:
    return np.arange(n) if given is None else np.asarray(given)


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise DimensionError(f"{what}: expected last extent {width}, got shape {x.shape}")


def _max_visible(logits: np.ndarray, mask: Optional[np.ndarray]) -> float:
    if mask is None:
        return float(logits.max())
    return float(np.where(np.broadcast_to(mask, logits.shape), logits, -np.inf).max())


# ---------------------------------------------------------------------------
# MHA


def mha_qk(Xq, Xk, w: MhaWeights, cfg: AttentionConfig, head: int,
           q_pos=None, k_pos=None) -> tuple[Tensor, Tensor]:
    """Per-head queries and keys after optional QK norm and RoPE."""
    if not 0 <= head < w.n_head:
        raise IndexError(f"head {head} out of range for {w.n_head} heads")
    Xq, Xk = T.as_tensor(Xq), T.as_tensor(Xk)
    _check_width(Xq, cfg.d_model, "queries")
    _check_width(Xk, cfg.d_model, "keys")
    q = Xq @ w.wq[head]
    k = Xk @ w.wk[head]
    if cfg.qk_norm_enabled:
        q = T.rms_norm(q, w.q_gain[head], cfg.norm_eps)
        k = T.rms_norm(k, w.k_gain[head], cfg.norm_eps)
    if cfg.rope:
        q = T.rope_apply(q, _positions(Xq.shape[-2], q_pos), cfg.theta_base)
        k = T.rope_apply(k, _positions(Xk.shape[-2], k_pos), cfg.theta_base)
    return q, k


def mha_logits(Xq, Xk, w: MhaWeights, cfg: AttentionConfig, head: int,
               q_pos=None, k_pos=None) -> Tensor:
    """Scaled logits (Xq W_Q)(Xk W_K)^T / sqrt(d_head) for one head."""
    q, k = mha_qk(Xq, Xk, w, cfg, head, q_pos, k_pos)
    return (q @ k.T) * cfg.scale


def _attend(logits: Tensor, v: Tensor, mask) -> Tensor:
    return T.softmax_rows(logits, mask) @ v


def mha_forward(X, w: MhaWeights, cfg: AttentionConfig,
                logits_out: Optional[dict] = None) -> tuple[Tensor, list[float]]:
    """Self-attention over the last two axes of X (..., s, d_model).

    Returns the projected output and, when ``cfg.track_max_logit`` is set,
    the largest visible scaled logit per head (empty list otherwise).  If
    ``logits_out`` is a dict it receives head -> logit array with masked
    entries set to NaN.
    """
    if cfg.variant != "mha":
        raise ValueError("mha_forward called with an mla config")
    X = T.as_tensor(X)
    s = X.shape[-2]
    mask = causal_mask(s) if cfg.causal else None
    heads, max_logits = [], []
    for h in range(w.n_head):
        logits = mha_logits(X, X, w, cfg, h)
        _collect(logits.data, mask, h, cfg, max_logits, logits_out)
        heads.append(_attend(logits, X @ w.wv[h], mask))
    return T.concat(heads, axis=-1) @ w.wo, max_logits


def _collect(logits: np.ndarray, mask, head: int, cfg: AttentionConfig,
             max_logits: list, logits_out: Optional[dict]) -> None:
    if cfg.track_max_logit:
        max_logits.append(_max_visible(logits, mask))
    if logits_out is not None:
        logits_out[head] = logits.copy() if mask is None else np.where(mask, logits, MASKED)


# ---------------------------------------------------------------------------
# MLA


def mla_latents(X, w: MlaWeights, cfg: AttentionConfig, positions=None):
    """Shared per-layer quantities: query latent, key/value latent, rotated rope key."""
    X = T.as_tensor(X)
    _check_width(X, cfg.d_model, "mla input")
    pos = _positions(X.shape[-2], positions)
    c_q = X @ w.w_dq
    c_kv = X @ w.w_dkv
    k_rope = T.rope_apply(X @ w.w_kr, pos, cfg.theta_base)
    return c_q, c_kv, k_rope


def mla_head_qk(c_q, c_kv, k_rope, w: MlaWeights, cfg: AttentionConfig, head: int,
                q_pos=None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(q_nope, q_rope, k_nope, k_rope) for one head, before any QK norm."""
    pos = _positions(c_q.shape[-2], q_pos)
    q_nope = c_q @ w.w_uq[head]
    q_rope = T.rope_apply(c_q @ w.w_qr[head], pos, cfg.theta_base)
    k_nope = c_kv @ w.w_uk[head]
    return q_nope, q_rope, k_nope, k_rope


def mla_logits(X, w: MlaWeights, cfg: AttentionConfig, head: int, positions=None,
               latents=None) -> Tensor:
    c_q, c_kv, k_rope = latents or mla_latents(X, w, cfg, positions)
    q_nope, q_rope, k_nope, k_rope = mla_head_qk(c_q, c_kv, k_rope, w, cfg, head, positions)
    q = T.concat([q_nope, q_rope], axis=-1)
    k = T.concat([k_nope, k_rope], axis=-1)
    if cfg.qk_norm_enabled:
        q = T.rms_norm(q, w.q_gain[head], cfg.norm_eps)
        k = T.rms_norm(k, w.k_gain[head], cfg.norm_eps)
    return (q @ k.T) * cfg.scale


def mla_logit_parts(X, w: MlaWeights, cfg: AttentionConfig, head: int,
                    positions=None) -> tuple[np.ndarray, np.ndarray]:
    """Scaled nope and rope contributions whose sum is the (un-normed) logit."""
    c_q, c_kv, k_rope = mla_latents(X, w, cfg, positions)
    q_nope, q_rope, k_nope, k_rope = mla_head_qk(c_q, c_kv, k_rope, w, cfg, head, positions)
    nope = q_nope.data @ np.swapaxes(k_nope.data, -1, -2)
    rope = q_rope.data @ np.swapaxes(k_rope.data, -1, -2)
    return nope * cfg.scale, rope * cfg.scale


def mla_forward(X, w: MlaWeights, cfg: AttentionConfig,
                logits_out: Optional[dict] = None) -> tuple[Tensor, list[float]]:
    if cfg.variant != "mla":
        raise ValueError("mla_forward called with an mha config")
    X = T.as_tensor(X)
    s = X.shape[-2]
    mask = causal_mask(s) if cfg.causal else None
    latents = mla_latents(X, w, cfg)
    c_kv = latents[1]
    heads, max_logits = [], []
    for h in range(w.n_head):
        logits = mla_logits(X, w, cfg, h, latents=latents)
        _collect(logits.data, mask, h, cfg, max_logits, logits_out)
        heads.append(_attend(logits, c_kv @ w.w_uv[h], mask))
    return T.concat(heads, axis=-1) @ w.wo, max_logits


def mla_kv_cache(X, w: MlaWeights, cfg: AttentionConfig, positions=None):
    """What an inference cache holds per token: c_kv and the rotated rope key."""
    _, c_kv, k_rope = mla_latents(X, w, cfg, positions)
    return c_kv.data, k_rope.data


def mla_absorbed_logits(x, ckv, krope, w: MlaWeights, cfg: AttentionConfig, head: int,
                        q_pos: int) -> float:
    """Logit of one query token against one cached key without forming k_nope.

    The nope part uses the absorbed (d_cq x d_ckv) matrix W_uq W_uk^T applied
    to the query latent, so only the cached ``ckv`` row is touched.
    """
    if cfg.qk_norm_enabled:
        raise ValueError("QK norm needs materialised keys; the absorbed path does not apply")
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    ckv = np.asarray(ckv, dtype=np.float64)
    krope = np.asarray(krope, dtype=np.float64)
    c_q = x @ w.w_dq.data
    absorbed = w.w_uq[head].data @ w.w_uk[head].data.T
    nope = c_q @ absorbed @ ckv
    q_rope = T.rope_apply(c_q @ w.w_qr[head].data, q_pos, cfg.theta_base).data
    return float((nope + q_rope @ krope) * cfg.scale)


def attention_forward(X, w, cfg: AttentionConfig, logits_out: Optional[dict] = None):
    if cfg.variant == "mha":
        return mha_forward(X, w, cfg, logits_out)
    return mla_forward(X, w, cfg, logits_out)
