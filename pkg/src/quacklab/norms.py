"""Matrix norms used by the learning-rate rules."""

from __future__ import annotations

import enum

import numpy as np

from .tensor import Tensor

POWER_SEED = 20240917


class NormKind(str, enum.Enum):
    FROBENIUS = "frobenius"
    SPECTRAL = "spectral"


class IterationLimitError(RuntimeError):
    def __init__(self, estimate: float, iters: int):
        super().__init__(f"power iteration did not converge in {iters} iterations "
                         f"(last estimate {estimate!r})")
        self.estimate = estimate


def _array(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)


def frobenius_norm(w) -> float:
    a = _array(w).astype(np.float64, copy=False)
    return float(np.sqrt(np.sum(a * a)))


def spectral_norm(w, tol: float = 1e-8, max_iters: int = 1000, block: int = 4) -> float:
    """Largest singular value by block power iteration on w^T w.

    A block of ``block`` seeded Gaussian vectors is multiplied by the Gram
    matrix, re-orthonormalised, and the top Ritz value extracted each
    iteration.  The extra vectors make convergence depend on the gap to the
    (block+1)-th singular value, so near-degenerate leading pairs do not
    stall.  Stops when the extrapolated remaining error of the eigenvalue is
    below ``tol`` relative.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = _array(w).astype(np.float64, copy=False)
    if a.ndim != 2:
        raise ValueError(f"spectral_norm expects a matrix, got shape {a.shape}")
    if not np.any(a):
        return 0.0
    if a.shape[1] > a.shape[0]:
        a = a.T
    gram = a.T @ a
    n = gram.shape[0]
    p = min(block, n)
    basis = np.random.default_rng(POWER_SEED).standard_normal((n, p))
    basis, _ = np.linalg.qr(basis)
    lam = float(np.linalg.eigvalsh(basis.T @ gram @ basis)[-1])
    prev_delta = None
    for _ in range(max_iters):
        basis, _ = np.linalg.qr(gram @ basis)
        ritz = np.linalg.eigvalsh(basis.T @ gram @ basis)
        new = float(ritz[-1])
        delta = abs(new - lam)
        lam = new
        if p == n or delta <= tol * 1e-3 * lam:
            return float(np.sqrt(lam))
        if prev_delta is not None and 0.0 < delta < prev_delta:
            ratio = delta / prev_delta
            if delta * ratio / (1.0 - ratio) <= 0.1 * tol * lam:
                return float(np.sqrt(lam))
        prev_delta = delta
    raise IterationLimitError(float(np.sqrt(lam)), max_iters)


def matrix_norm(w, kind: NormKind | str = NormKind.FROBENIUS) -> float:
    kind = NormKind(kind)
    if kind is NormKind.FROBENIUS:
        return frobenius_norm(w)
    return spectral_norm(w)
