"""Dense matrix primitives: norms, numeric rank, small SVD, balanced factors.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 with two axes.
:func:`as_matrix` is the single entry point that validates them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, DegenerateInputError, RejectedInputError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 1000

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NormEstimate:
    value: float
    iterations: int
    converged: bool
    tol: float

    def __float__(self) -> float:
        return self.value


def as_matrix(A, name: str = "matrix") -> np.ndarray:
    """Return ``A`` as a finite float64 2-D array, raising on bad input."""
    M = np.asarray(A, dtype=np.float64)
    if M.ndim != 2:
        raise RejectedInputError(f"{name} must be 2-D, got shape {M.shape}")
    if M.shape[0] < 1 or M.shape[1] < 1:
        raise RejectedInputError(f"{name} must have positive dimensions, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise RejectedInputError(f"{name} has non-finite entries")
    return M


def splitmix64(seed: int, n: int) -> np.ndarray:
    """``n`` uint64 draws from the splitmix64 sequence started at ``seed``."""
    state = seed & _MASK64
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out[i] = z ^ (z >> 31)
    return out


def start_vector(n: int, seed: int) -> np.ndarray:
    """Unit vector in R^n with entries drawn uniformly from [-1, 1) via splitmix64."""
    bits = splitmix64(seed, n) >> np.uint64(11)
    v = bits.astype(np.float64) * (2.0 / 9007199254740992.0) - 1.0
    nrm = np.linalg.norm(v)
    if nrm == 0.0:
        v = np.ones(n)
        nrm = np.sqrt(n)
    return v / nrm


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    rmatvec: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
) -> NormEstimate:
    """Largest singular value of the operator ``B`` given ``v -> Bv`` and ``u -> B^T u``.

    Iterates on ``B^T B``.  The Rayleigh value ``||Bv||^2`` is monitored and the
    loop stops once its relative change, and the geometric extrapolation of the
    remaining changes, both fall below ``tol``.
    """
    if not tol > 0:
        raise RejectedInputError("tol must be positive")
    if max_iter < 1:
        raise RejectedInputError("max_iter must be >= 1")
    v = start_vector(n, seed)
    lam_prev = None
    delta_prev = None
    lam = 0.0
    for it in range(1, max_iter + 1):
        u = matvec(v)
        lam = float(np.dot(u, u))
        if lam == 0.0 and lam_prev is None:
            # start vector in the null space is measure-zero; treat as zero operator
            return NormEstimate(0.0, 0, True, tol)
        w = rmatvec(u)
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return NormEstimate(float(np.sqrt(lam)), it, True, tol)
        v = w / wn
        if lam_prev is not None:
            delta = abs(lam - lam_prev) / lam
            if delta == 0.0:
                return NormEstimate(float(np.sqrt(lam)), it, True, tol)
            if delta < tol:
                rho = 0.0
                if delta_prev:
                    rho = min(delta / delta_prev, 0.999)
                if delta * rho / (1.0 - rho) < tol:
                    return NormEstimate(float(np.sqrt(lam)), it, True, tol)
            delta_prev = delta
        lam_prev = lam
    return NormEstimate(float(np.sqrt(lam)), max_iter, False, tol)


def _scaled(A):
    # dividing by the largest magnitude keeps squares clear of under/overflow
    scale = float(np.max(np.abs(A)))
    return (A / scale if scale > 0 else A), scale


def spectral_norm(
    A, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, seed: int = 0
) -> NormEstimate:
    """Power-iteration estimate of ``||A||_2``; deterministic in ``(A, tol, max_iter, seed)``."""
    A = as_matrix(A)
    if not np.any(A):
        return NormEstimate(0.0, 0, True, tol)
    A, scale = _scaled(A)
    B = A if A.shape[0] >= A.shape[1] else A.T
    est = power_iteration(lambda v: B @ v, lambda u: B.T @ u, B.shape[1], tol, max_iter, seed)
    return NormEstimate(est.value * scale, est.iterations, est.converged, est.tol)


def frobenius_norm(A) -> float:
    A, scale = _scaled(as_matrix(A))
    return float(np.sqrt(np.sum(A * A))) * scale


def two_one_norm(A) -> float:
    """Sum over rows of each row's Euclidean norm."""
    A, scale = _scaled(as_matrix(A))
    return float(np.sum(np.sqrt(np.sum(A * A, axis=1)))) * scale


def svd_small(A):
    """Thin SVD ``A = U diag(S) V^T`` with ``S`` nonincreasing.

    Returns ``(U, S, V)``; note ``V`` (not ``V^T``).
    """
    A = as_matrix(A)
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ConvergenceError(f"SVD did not converge: {exc}") from exc
    return U, S, Vt.T


def numeric_rank(A, tol_override: Optional[float] = None) -> int:
    A = as_matrix(A)
    S = svd_small(A)[1]
    if tol_override is None:
        tol = max(A.shape) * np.finfo(np.float64).eps * (S[0] if S.size else 0.0)
    else:
        tol = tol_override
    return int(np.sum(S > tol))


def balanced_factorize(A):
    """Factor ``A = U V^T`` with ``||U||_2 = ||V||_2 = ||A||_2^{1/2}``.

    Both factors have ``numeric_rank(A)`` columns.
    """
    A = as_matrix(A)
    if not np.any(A):
        raise DegenerateInputError("cannot factor the zero matrix")
    U, S, V = svd_small(A)
    r = numeric_rank(A)
    root = np.sqrt(S[:r])
    return U[:, :r] * root, V[:, :r] * root
