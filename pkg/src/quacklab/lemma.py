"""Direct checks of the bounded-logit-change guarantee on small dense matrices.

Everything is in the row convention used by the model: a query is
``x @ W_Q`` and a logit is ``x W_Q W_K^T y^T / sqrt(d_head)``, so the
worst-case change over unit ``x`` and ``y`` is the largest singular value
of ``W_Q' W_K'^T - W_Q W_K^T``.  Singular values come from a one-sided
Jacobi routine written here, so the checks do not lean on the training
stack or on LAPACK.

A trial draws random weights and conditioned gradients ``G`` with
recorded norm ``D``, takes one step at the QuacK learning rates, and
compares the measured change against the analytic bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .norms import NormKind
from .optim import newton_schulz
from .tensor import rope_apply
from .telemetry import fmt

SAMPLERS = ("muon", "adam")
MLA_TERMS = ("nope_q", "rope_q", "nope_k", "rope_k", "quadratic", "total")
# measured <= bound * (1 + SLACK); covers rounding in the dense products only
SLACK = 1e-12


# ---------------------------------------------------------------------------
# singular values


def _round_robin_perm(n: int) -> np.ndarray:
    """Column permutation that advances a round-robin pairing by one round.

    Columns j and j + n/2 are paired; applying the permutation n-1 times
    meets every pair exactly once (circle method) and restores the order.
    """
    h = n // 2

    def layout(slots):
        return slots[:h] + slots[h:][::-1]

    slots = list(range(n))
    old = {c: p for p, c in enumerate(layout(slots))}
    turned = [slots[0], slots[-1]] + slots[1:-1]
    return np.array([old[c] for c in layout(turned)])


_PERMS: dict[int, np.ndarray] = {}


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int, want_v: bool):
    """One-sided Jacobi on a (..., m, n) stack with n even; returns (A V, V or None).

    Leading axes are independent matrices processed together.
    """
    n = a.shape[-1]
    h = n // 2
    perm = _PERMS.setdefault(n, _round_robin_perm(n))
    v = np.broadcast_to(np.eye(n), a.shape[:-2] + (n, n)).copy() if want_v else None
    # columns this small are rounding noise of a rank-deficient input; rotating
    # them against each other never converges and cannot move sigma by an ulp
    negligible = (np.finfo(np.float64).eps * np.sqrt(np.einsum("...ij,...ij->...", a, a))) ** 2
    negligible = negligible[..., None]
    for _ in range(max_sweeps):
        rotated = False
        for _ in range(n - 1):
            left, right = a[..., :h], a[..., h:]
            alpha = np.einsum("...ij,...ij->...j", left, left)
            beta = np.einsum("...ij,...ij->...j", right, right)
            gamma = np.einsum("...ij,...ij->...j", left, right)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & \
                (np.minimum(alpha, beta) > negligible)
            if active.any():
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = np.where(active, c * t, 0.0)[..., None, :]
                c = np.where(active, c, 1.0)[..., None, :]
                a = np.concatenate([c * left - s * right, s * left + c * right], axis=-1)
                if v is not None:
                    vl, vr = v[..., :h], v[..., h:]
                    v = np.concatenate([c * vl - s * vr, s * vl + c * vr], axis=-1)
            a = a[..., perm]
            if v is not None:
                v = v[..., perm]
        if not rotated:
            break
    return a, v


def _pad_even(a: np.ndarray) -> np.ndarray:
    if a.shape[-1] % 2:
        a = np.concatenate([a, np.zeros(a.shape[:-1] + (1,))], axis=-1)
    return a


def _column_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...ij,...ij->...j", a, a))


def singular_values(a, tol: float = 1e-15, max_sweeps: int = 80) -> np.ndarray:
    """All singular values of ``a``, descending along the last axis, by one-sided Jacobi.

    Columns are orthogonalised pairwise with plane rotations (disjoint
    pairs rotated together); the singular values are the final column
    norms.  Accurate to a few ulps relative for the small matrices used
    here.  A 3-D input is a stack of matrices.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (2, 3):
        raise ValueError("singular_values expects a matrix or a stack of matrices")
    if a.shape[-2] < a.shape[-1]:
        a = np.swapaxes(a, -1, -2)
    keep = a.shape[-1]
    if a.size == 0:
        return np.zeros(a.shape[:-2] + (keep,))
    if keep == 1:
        return _column_norms(a)
    rotated, _ = _jacobi(_pad_even(a), tol, max_sweeps, want_v=False)
    sv = -np.sort(-_column_norms(rotated), axis=-1)
    return sv[..., :keep]


def sigma_max(a):
    """Largest singular value; a float for a matrix, an array for a stack."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0.0 if a.ndim == 2 else np.zeros(a.shape[:-2])
    top = singular_values(a)[..., 0]
    return float(top) if a.ndim == 2 else top


def sigma_max_product(left, right):
    """sigma_max(left @ right^T) without forming the product when the inner size is small.

    With left V = U S (Jacobi), left right^T = U S V^T right^T, so the
    singular values are those of right V S, which has only k columns.
    Stacks of matrices are handled along the leading axis.
    """
    left, right = np.asarray(left, np.float64), np.asarray(right, np.float64)
    k = left.shape[-1]
    if 2 * k >= min(left.shape[-2], right.shape[-2]) or k == 1:
        return sigma_max(left @ np.swapaxes(right, -1, -2))
    padded = _pad_even(left)
    rotated, v = _jacobi(padded, 1e-15, 80, want_v=True)
    s = _column_norms(rotated)
    right_v = _pad_even(right) @ v
    return sigma_max(right_v * s[..., None, :])


def weight_norm(w, kind: NormKind | str) -> float:
    w = np.asarray(w, dtype=np.float64)
    if NormKind(kind) is NormKind.SPECTRAL:
        return sigma_max(w)
    return float(np.sqrt(np.sum(w * w)))


# ---------------------------------------------------------------------------
# MHA


def rotation(d: int, position: float) -> np.ndarray:
    """Matrix R with rope(v, p) = v @ R for row vectors v of width d."""
    return rope_apply(np.eye(d), position).data


def worst_case_delta_logit(wq, wk, dwq, dwk, d_head: int, rot=None) -> float:
    """max over unit x, y of |x (W_Q' R W_K'^T - W_Q R W_K^T) y^T| / sqrt(d_head).

    Weights are (d_model, d_head).  ``rot`` is the relative rotation
    R = R_p R_k^T between the query and key positions, identity if None.
    """
    wq, wk = np.asarray(wq, np.float64), np.asarray(wk, np.float64)
    wq2, wk2 = wq + np.asarray(dwq, np.float64), wk + np.asarray(dwk, np.float64)
    r = np.eye(wq.shape[1]) if rot is None else np.asarray(rot, np.float64)
    delta = wq2 @ r @ wk2.T - wq @ r @ wk.T
    return sigma_max(delta) / math.sqrt(d_head)


def mha_bound(tau_q: float, tau_k: float, d: float, norm_q: float, norm_k: float,
              d_head: int) -> float:
    """(tau_Q D + tau_K D + tau_Q tau_K D^2 / (|W_Q| |W_K|)) / sqrt(d_head)."""
    return (tau_q * d + tau_k * d + tau_q * tau_k * d * d / (norm_q * norm_k)) / math.sqrt(d_head)


def conditioned_gradient(rng: np.random.Generator, shape, sampler: str, scale: float = 1.0
                         ) -> np.ndarray:
    """A stand-in optimizer direction: orthogonalised Gaussian or uniform in [-1, 1]."""
    if sampler == "muon":
        return scale * newton_schulz(rng.standard_normal(shape))
    if sampler == "adam":
        return scale * rng.uniform(-1.0, 1.0, size=shape)
    raise ValueError(f"unknown gradient sampler {sampler!r}")


@dataclass
class LemmaTrial:
    suite: str
    seed: int
    norm_kind: str
    sampler: str
    dims: dict[str, int]
    tau_q: float
    tau_k: float
    D: float
    c: float
    measured: float
    bound: float
    # MLA: per-term (measured, bound); MHA carries only "total"
    terms: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.measured / self.bound if self.bound > 0 else 0.0

    @property
    def ok(self) -> bool:
        return all(m <= b * (1 + SLACK) for m, b in self.terms.values())

    def violations(self) -> list[str]:
        return [name for name, (m, b) in self.terms.items() if not m <= b * (1 + SLACK)]


def _log_uniform(rng, lo, hi) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _mha_dims(rng) -> dict[str, int]:
    d_model = int(rng.integers(4, 33))
    d_head = 2 * int(rng.integers(1, min(16, d_model) // 2 + 1))
    return {"d_model": d_model, "d_head": d_head}


def mha_lemma_trial(dims: Mapping[str, int] | None, tau_q: float, tau_k: float, seed: int,
                    norm_kind: NormKind | str = NormKind.FROBENIUS, sampler: str = "muon",
                    positions: tuple[float, float] | None = None,
                    weight_scale: tuple[float, float] | None = None) -> LemmaTrial:
    """One random step of W_Q, W_K at eta_Q = tau_Q/|W_K|, eta_K = tau_K/|W_Q|.

    ``dims`` None draws them from the seed.  ``weight_scale`` fixes the
    two weight multipliers (otherwise log-uniform in [1e-2, 1e2]) and
    ``positions`` applies RoPE at the given query/key positions.
    """
    if not (tau_q > 0 and tau_k > 0):
        raise ValueError("tau_q and tau_k must be positive")
    kind = NormKind(norm_kind)
    rng = np.random.default_rng([seed, 101])
    dims = dict(dims) if dims is not None else _mha_dims(rng)
    d_model, d_head = dims["d_model"], dims["d_head"]
    if weight_scale is None:
        weight_scale = (_log_uniform(rng, 1e-2, 1e2), _log_uniform(rng, 1e-2, 1e2))
    wq = weight_scale[0] * rng.standard_normal((d_model, d_head)) / math.sqrt(d_model)
    wk = weight_scale[1] * rng.standard_normal((d_model, d_head)) / math.sqrt(d_model)
    grad_scale = _log_uniform(rng, 0.1, 10.0)
    gq = conditioned_gradient(rng, wq.shape, sampler, grad_scale)
    gk = conditioned_gradient(rng, wk.shape, sampler, grad_scale)
    d = max(weight_norm(gq, kind), weight_norm(gk, kind))
    nq, nk = weight_norm(wq, kind), weight_norm(wk, kind)
    eta_q, eta_k = tau_q / nk, tau_k / nq
    rot = None
    if positions is not None:
        rot = rotation(d_head, positions[0]) @ rotation(d_head, positions[1]).T
    measured = worst_case_delta_logit(wq, wk, -eta_q * gq, -eta_k * gk, d_head, rot)
    bound = mha_bound(tau_q, tau_k, d, nq, nk, d_head)
    return LemmaTrial("mha", seed, kind.value, sampler, dims, tau_q, tau_k, d, min(nq, nk),
                      measured, bound, {"total": (measured, bound)})


# ---------------------------------------------------------------------------
# MLA


def mla_rates(norms: Mapping[str, Sequence[float] | float], tau: float) -> dict[str, list[float] | float]:
    """Bounded-change learning rates for the six MLA weight families.

    ``norms`` holds scalars for the shared ``dq``, ``dkv``, ``kr`` and a
    per-head list for ``uq``, ``uk``, ``qr``.
    """
    dq, dkv, kr = norms["dq"], norms["dkv"], norms["kr"]
    uq, uk, qr = list(norms["uq"]), list(norms["uk"]), list(norms["qr"])
    heads = range(len(uq))
    return {
        "uq": [tau / (dq * uk[h] * dkv) for h in heads],
        "uk": [tau / (uq[h] * dq * dkv) for h in heads],
        "qr": [tau / (dq * kr) for h in heads],
        "dq": tau * min(1.0 / max(uq[h] * uk[h] * dkv for h in heads),
                        1.0 / max(qr[h] * kr for h in heads)),
        "dkv": tau / max(uq[h] * dq * uk[h] for h in heads),
        "kr": tau / max(qr[h] * dq for h in heads),
    }


def mla_term_bounds(norms: Mapping, rates: Mapping, d: float, tau: float, head: int
                    ) -> dict[str, float]:
    """Analytic bounds (before the 1/sqrt(d_head) factor) for one head.

    The four first-order terms are 2 tau D plus a D^2 remainder (tau D for
    the rope-key term); the quadratic term is bounded by the product of
    the query- and key-change bounds.
    """
    dq, dkv, kr = norms["dq"], norms["dkv"], norms["kr"]
    uq, uk, qr = norms["uq"][head], norms["uk"][head], norms["qr"][head]
    e_uq, e_uk, e_qr = rates["uq"][head], rates["uk"][head], rates["qr"][head]
    e_dq, e_dkv, e_kr = rates["dq"], rates["dkv"], rates["kr"]
    out = {
        "nope_q": 2 * tau * d + e_uq * e_dq * d * d * uk * dkv,
        "rope_q": 2 * tau * d + e_qr * e_dq * d * d * kr,
        "nope_k": 2 * tau * d + e_uk * e_dkv * d * d * uq * dq,
        "rope_k": tau * d,
    }
    q_nope = e_uq * d * dq + e_dq * d * uq + e_uq * e_dq * d * d
    q_rope = e_qr * d * dq + e_dq * d * qr + e_qr * e_dq * d * d
    k_nope = e_uk * d * dkv + e_dkv * d * uk + e_uk * e_dkv * d * d
    k_rope = e_kr * d
    out["quadratic"] = math.hypot(q_nope, q_rope) * math.hypot(k_nope, k_rope)
    out["total"] = sum(out.values())
    return out


def mla_delta_terms(w: Mapping, dw: Mapping, positions=(0.0, 0.0), head: int | None = None
                    ) -> dict[str, np.ndarray | float]:
    """Measured worst-case size of each piece of the logit change (no 1/sqrt(d_head)).

    ``w`` and ``dw`` map family names to arrays (per-head lists for uq, uk,
    qr).  Pieces: change of the nope/rope query against the old key, old
    query against the changed nope/rope key, the product of both changes,
    and the whole change.  Values are arrays over heads, or floats when
    ``head`` is given.
    """
    heads = slice(None) if head is None else slice(head, head + 1)

    def get(src, name):
        return np.stack(src[name])[heads] if name in ("uq", "uk", "qr") else src[name]

    def new(name):
        return get(w, name) + get(dw, name)

    a_n, b_n = w["dq"] @ get(w, "uq"), w["dkv"] @ get(w, "uk")
    a_r = w["dq"] @ get(w, "qr")
    b_r = np.broadcast_to(w["kr"], a_r.shape[:1] + w["kr"].shape)
    da_n, db_n = new("dq") @ new("uq") - a_n, new("dkv") @ new("uk") - b_n
    da_r, db_r = new("dq") @ new("qr") - a_r, new("kr") - b_r
    d_rope = a_r.shape[-1]
    rot = rotation(d_rope, positions[0]) @ rotation(d_rope, positions[1]).T
    terms = {
        "nope_q": sigma_max_product(da_n, b_n),
        "rope_q": sigma_max_product(da_r @ rot, b_r),
        "nope_k": sigma_max_product(a_n, db_n),
        "rope_k": sigma_max_product(a_r @ rot, db_r),
        "quadratic": sigma_max_product(np.concatenate([da_n, da_r @ rot], axis=-1),
                                       np.concatenate([db_n, db_r], axis=-1)),
        # new minus old, written as one product so it is never formed by subtraction
        "total": sigma_max_product(
            np.concatenate([da_n, a_n, da_r @ rot, a_r @ rot], axis=-1),
            np.concatenate([b_n + db_n, db_n, b_r + db_r, db_r], axis=-1)),
    }
    if head is not None:
        return {k: float(v[0]) for k, v in terms.items()}
    return terms


def _mla_dims(rng) -> dict[str, int]:
    return {"d_model": int(rng.integers(4, 33)), "n_head": int(rng.integers(1, 5)),
            "d_cq": int(rng.integers(2, 17)), "d_ckv": int(rng.integers(2, 17)),
            "d_nope": int(rng.integers(1, 17)), "d_rope": 2 * int(rng.integers(1, 9))}


def mla_lemma_trial(dims: Mapping[str, int] | None, tau: float, seed: int,
                    norm_kind: NormKind | str = NormKind.FROBENIUS, sampler: str = "muon",
                    positions: tuple[float, float] | None = None) -> LemmaTrial:
    """One random step of all six MLA families at the bounded-change rates.

    Every head is checked; each reported term is the head with the largest
    measured/bound ratio.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    kind = NormKind(norm_kind)
    rng = np.random.default_rng([seed, 202])
    dims = dict(dims) if dims is not None else _mla_dims(rng)
    dm, nh = dims["d_model"], dims["n_head"]
    shapes = {"dq": (dm, dims["d_cq"]), "dkv": (dm, dims["d_ckv"]), "kr": (dm, dims["d_rope"]),
              "uq": (dims["d_cq"], dims["d_nope"]), "uk": (dims["d_ckv"], dims["d_nope"]),
              "qr": (dims["d_cq"], dims["d_rope"])}
    grad_scale = _log_uniform(rng, 0.1, 10.0)

    def draw(shape):
        return _log_uniform(rng, 1e-2, 1e2) * rng.standard_normal(shape) / math.sqrt(shape[0])

    w, g = {}, {}
    for name, shape in shapes.items():
        if name in ("uq", "uk", "qr"):
            w[name] = [draw(shape) for _ in range(nh)]
            g[name] = [conditioned_gradient(rng, shape, sampler, grad_scale) for _ in range(nh)]
        else:
            w[name] = draw(shape)
            g[name] = conditioned_gradient(rng, shape, sampler, grad_scale)
    if positions is None:
        positions = (float(rng.integers(0, 64)), float(rng.integers(0, 64)))

    def norm_of(src):
        return {k: ([weight_norm(x, kind) for x in v] if isinstance(v, list)
                    else weight_norm(v, kind)) for k, v in src.items()}

    norms = norm_of(w)
    gnorms = norm_of(g)
    d = max(max(v) if isinstance(v, list) else v for v in gnorms.values())
    rates = mla_rates(norms, tau)
    dw = {k: ([-r * x for r, x in zip(rates[k], v)] if isinstance(v, list) else -rates[k] * v)
          for k, v in g.items()}
    scale = math.sqrt(dims["d_nope"] + dims["d_rope"])
    worst: dict[str, tuple[float, float]] = {}
    measured_all = mla_delta_terms(w, dw, positions)
    for h in range(nh):
        measured = {k: float(v[h]) for k, v in measured_all.items()}
        bounds = mla_term_bounds(norms, rates, d, tau, h)
        for term in MLA_TERMS:
            pair = (measured[term] / scale, bounds[term] / scale)
            if term not in worst or _ratio(pair) > _ratio(worst[term]):
                worst[term] = pair
    c = min(min(v) if isinstance(v, list) else v for v in norms.values())
    total = worst["total"]
    return LemmaTrial("mla", seed, kind.value, sampler, dims, tau, tau, d, c,
                      total[0], total[1], worst)


def _ratio(pair) -> float:
    return pair[0] / pair[1] if pair[1] > 0 else 0.0


# ---------------------------------------------------------------------------
# suites and output


def run_suite(suite: str, trials: int, root_seed: int = 0,
              norm_kinds: Iterable[NormKind | str] = (NormKind.FROBENIUS, NormKind.SPECTRAL)
              ) -> list[LemmaTrial]:
    """``trials`` seeded trials per norm kind; samplers alternate by trial index."""
    if suite not in ("mha", "mla"):
        raise ValueError(f"unknown lemma suite {suite!r}")
    out = []
    for kind in norm_kinds:
        for i in range(trials):
            seed = root_seed * 1_000_003 + i
            rng = np.random.default_rng([seed, 303])
            sampler = SAMPLERS[i % len(SAMPLERS)]
            positions = None if i % 3 else (float(rng.integers(0, 64)),
                                            float(rng.integers(0, 64)))
            if suite == "mha":
                tau_q, tau_k = _log_uniform(rng, 1e-3, 10.0), _log_uniform(rng, 1e-3, 10.0)
                out.append(mha_lemma_trial(None, tau_q, tau_k, seed, kind, sampler, positions))
            else:
                tau = _log_uniform(rng, 1e-3, 10.0)
                out.append(mla_lemma_trial(None, tau, seed, kind, sampler, positions))
    return out


TRIAL_COLUMNS = ["suite", "seed", "norm_kind", "sampler", "dims", "tau_q", "tau_k", "D", "c",
                 "term", "measured", "bound", "ratio"]


def _dims_text(dims: Mapping[str, int]) -> str:
    return " ".join(f"{k}={v}" for k, v in dims.items())


def write_trials_csv(trials: Sequence[LemmaTrial], path) -> Path:
    """One row per (trial, term); MHA trials have the single term 'total'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIAL_COLUMNS)
        for t in trials:
            for term, (m, b) in t.terms.items():
                writer.writerow([t.suite, t.seed, t.norm_kind, t.sampler, _dims_text(t.dims),
                                 fmt(t.tau_q), fmt(t.tau_k), fmt(t.D), fmt(t.c), term,
                                 fmt(m), fmt(b), fmt(_ratio((m, b)))])
    return path


def summarize(trials: Sequence[LemmaTrial]) -> dict:
    """Violation count and the spread of measured/bound ratios."""
    ratios = np.array([t.ratio for t in trials]) if trials else np.zeros(0)
    bad = [t for t in trials if not t.ok]
    return {"trials": len(trials), "violations": len(bad),
            "failed_seeds": [(t.norm_kind, t.seed, t.violations()) for t in bad],
            "ratio_min": float(ratios.min()) if ratios.size else math.nan,
            "ratio_median": float(np.median(ratios)) if ratios.size else math.nan,
            "ratio_max": float(ratios.max()) if ratios.size else math.nan}
