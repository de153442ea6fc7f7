"""Structured weight matrices: strided circulant convolutions and width-change operators.

Index conventions: formulas for these operators are usually written 1-indexed.
Storage here is 0-indexed, so a 1-indexed entry ``(i, j)`` lives at
``[i - 1, j - 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InfeasibleError, RejectedInputError, StructureError, ValidationError
from .linalg_core import DEFAULT_TOL, as_matrix, frobenius_norm, spectral_norm

ORTHO_TOL = 1e-10

WIDTH_OP_KINDS = ("padding", "one_by_one_conv", "avg_pool", "max_pool")


@dataclass(frozen=True)
class FilterBank:
    """``n`` filters of length ``k`` applied with stride ``s``.

    ``filters`` has shape ``(n, k)``.  Setting ``orthonormal=True`` asserts the
    rows are orthonormal and is checked on construction.
    """

    filters: np.ndarray
    s: int
    orthonormal: bool = False

    def __post_init__(self):
        F = np.asarray(self.filters, dtype=np.float64)
        if F.ndim == 1:
            F = F[None, :]
        if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
            raise StructureError(f"filters must be an (n, k) array, got shape {F.shape}")
        if not np.all(np.isfinite(F)):
            raise RejectedInputError("filters have non-finite entries")
        if self.s < 1 or F.shape[1] % self.s:
            raise StructureError(f"stride {self.s} must divide filter length {F.shape[1]}")
        object.__setattr__(self, "filters", F)
        if self.orthonormal:
            n, k = F.shape
            if n > k:
                raise InfeasibleError(f"{n} orthonormal filters cannot live in R^{k}")
            resid = np.max(np.abs(F @ F.T - np.eye(n)))
            if resid > ORTHO_TOL:
                raise StructureError(f"filters flagged orthonormal but Gram residual is {resid:.3e}")

    @property
    def n(self) -> int:
        return self.filters.shape[0]

    @property
    def k(self) -> int:
        return self.filters.shape[1]


@dataclass(frozen=True)
class WidthOp:
    kind: str
    p: int
    s: int = 1
    coeffs: Optional[np.ndarray] = field(default=None, compare=False)
    signed: bool = False

    def __post_init__(self):
        if self.kind not in WIDTH_OP_KINDS:
            raise ValidationError(f"unknown width op kind {self.kind!r}")
        if self.s < 1 or self.p < 1:
            raise StructureError("width op needs p >= 1 and s >= 1")
        if self.kind in ("avg_pool", "max_pool") and self.p % self.s:
            raise StructureError(f"pooling factor {self.s} must divide width {self.p}")
        if self.kind == "one_by_one_conv":
            if self.coeffs is None:
                raise ValidationError("one_by_one_conv requires coeffs")
            c = np.asarray(self.coeffs, dtype=np.float64).ravel()
            if c.size != self.s:
                raise StructureError(f"expected {self.s} coefficients, got {c.size}")
            object.__setattr__(self, "coeffs", c)

    @property
    def out_dim(self) -> int:
        if self.kind in ("padding", "one_by_one_conv"):
            return self.s * self.p
        return self.p // self.s


def _check_circulant(k: int, p_prev: int, s: int) -> None:
    if s < 1 or k % s or p_prev % s:
        raise StructureError(f"stride {s} must divide filter length {k} and width {p_prev}")
    if k > p_prev:
        raise StructureError(f"filter length {k} exceeds input width {p_prev}")


def _circulant_index(k: int, p_prev: int, s: int):
    rows = np.repeat(np.arange(p_prev // s), k)
    cols = (rows * s + np.tile(np.arange(k), p_prev // s)) % p_prev
    return rows, cols


def circulant_block(w, p_prev: int, s: int) -> np.ndarray:
    """``(p_prev/s) x p_prev`` matrix whose row ``i`` holds ``w`` from column ``i*s``, wrapping."""
    w = np.asarray(w, dtype=np.float64).ravel()
    k = w.size
    _check_circulant(k, p_prev, s)
    rows, cols = _circulant_index(k, p_prev, s)
    M = np.zeros((p_prev // s, p_prev))
    M[rows, cols] = np.tile(w, p_prev // s)
    return M


def conv_weight(bank: FilterBank, p_prev: int) -> np.ndarray:
    """Stack the circulant blocks of every filter: shape ``(n*p_prev/s, p_prev)``."""
    _check_circulant(bank.k, p_prev, bank.s)
    return np.vstack([circulant_block(w, p_prev, bank.s) for w in bank.filters])


def conv_scatter_index(n: int, k: int, s: int, p_prev: int):
    """Flat ``(row, col)`` indices into ``conv_weight`` for each filter entry.

    Returns arrays of shape ``(n, p_prev/s, k)`` so that
    ``W[rows, cols] = filters[:, None, :]`` builds the matrix and
    ``G[rows, cols].sum(axis=1)`` pulls a dense gradient back to the filters.
    """
    _check_circulant(k, p_prev, s)
    blocks = p_prev // s
    i = np.arange(blocks)[:, None]
    t = np.arange(k)[None, :]
    cols = np.broadcast_to((i * s + t) % p_prev, (n, blocks, k))
    rows = np.arange(n)[:, None, None] * blocks + np.broadcast_to(i, (blocks, k))[None]
    return rows, cols


def _isqrt_exact(v: int, what: str) -> int:
    r = math.isqrt(v)
    if r * r != v:
        raise StructureError(f"{what}={v} is not a perfect square")
    return r


def conv_weight_2d(bank2d, p_prev: int, s: int) -> np.ndarray:
    """Weight matrix of square 2-D filters acting on a vectorized square input.

    ``bank2d`` has shape ``(n, sqrt(k), sqrt(k))``.  Each filter's rows are laid
    out with a gap of ``sqrt(p_prev/k) - sqrt(k)`` zeros after each, giving a
    pattern of length ``sqrt(p_prev)``; every diagonal block of the filter's
    block-diagonal matrix shifts that pattern by ``s/sqrt(k)`` per row with
    wrap-around, and the ``sqrt(p_prev)`` diagonal blocks cover the input.
    """
    F = np.asarray(bank2d, dtype=np.float64)
    if F.ndim == 2:
        F = F[None]
    if F.ndim != 3 or F.shape[1] != F.shape[2]:
        raise StructureError("2-D filters must be square")
    rk = F.shape[1]
    k = rk * rk
    rp = _isqrt_exact(p_prev, "p_prev")
    if p_prev % k:
        raise StructureError(f"filter size {k} must divide p_prev={p_prev}")
    seg = _isqrt_exact(p_prev // k, "p_prev/k")
    if seg < rk:
        raise StructureError("filter rows do not fit their segments")
    if s % rk:
        raise StructureError(f"stride {s} must be a multiple of sqrt(k)={rk}")
    shift = s // rk
    if shift < 1 or rp % shift:
        raise StructureError(f"in-block shift {shift} must divide sqrt(p_prev)={rp}")
    blocks = []
    for filt in F:
        pattern = np.zeros(rp)
        for i in range(rk):
            pattern[i * seg : i * seg + rk] = filt[i]
        diag = circulant_block(pattern, rp, shift)
        blocks.append(np.kron(np.eye(rp), diag))
    return np.vstack(blocks)


def orthonormalize_filters(n: int, k: int, seed: int, s: int = 1) -> FilterBank:
    """Gram-Schmidt on seeded Gaussian vectors, returned as an orthonormal bank."""
    if n > k:
        raise InfeasibleError(f"cannot build {n} orthonormal filters of length {k}")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, k))
    Q = np.zeros((n, k))
    for j in range(n):
        v = G[j].copy()
        for _ in range(2):  # second pass restores orthogonality lost to roundoff
            for i in range(j):
                v -= np.dot(Q[i], v) * Q[i]
        Q[j] = v / np.linalg.norm(v)
    return FilterBank(Q, s, orthonormal=True)


def padding_op(p: int, s: int) -> np.ndarray:
    """Zero padding: ``T[j*s, j] = 1`` (1-indexed) in an ``sp x p`` matrix."""
    if s < 1 or p < 1:
        raise StructureError("padding needs p >= 1 and s >= 1")
    T = np.zeros((s * p, p))
    j = np.arange(p)
    T[(j + 1) * s - 1, j] = 1.0
    return T


def one_by_one_conv_op(coeffs, p: int) -> np.ndarray:
    """Width expansion by ``s`` scaled copies of the input, ``[c_1 I; ...; c_s I]``."""
    c = np.asarray(coeffs, dtype=np.float64).ravel()
    if c.size < 1:
        raise StructureError("need at least one coefficient")
    return np.kron(c[:, None], np.eye(p))


def avg_pool_op(p: int, s: int) -> np.ndarray:
    if s < 1 or p % s:
        raise StructureError(f"pooling factor {s} must divide width {p}")
    return np.kron(np.eye(p // s), np.full((1, s), 1.0 / s))


def max_pool_select(x, s: int, signed: bool = False) -> np.ndarray:
    """Index of the selected entry in each length-``s`` segment; ties go to the lowest index.

    By default entries are compared by absolute value; ``signed=True`` uses the
    conventional signed comparison.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if s < 1 or x.size % s:
        raise StructureError(f"pooling factor {s} must divide width {x.size}")
    seg = x.reshape(-1, s)
    key = seg if signed else np.abs(seg)
    return np.argmax(key, axis=1) + np.arange(seg.shape[0]) * s


def max_pool_op(x, s: int, signed: bool = False):
    """Return ``(T, pooled)`` for max pooling of ``x``; ``T`` is the 0/1 selection matrix."""
    x = np.asarray(x, dtype=np.float64).ravel()
    idx = max_pool_select(x, s, signed)
    T = np.zeros((idx.size, x.size))
    T[np.arange(idx.size), idx] = 1.0
    return T, x[idx]


def width_op_matrix(op: WidthOp, x=None) -> np.ndarray:
    if op.kind == "padding":
        return padding_op(op.p, op.s)
    if op.kind == "one_by_one_conv":
        return one_by_one_conv_op(op.coeffs, op.p)
    if op.kind == "avg_pool":
        return avg_pool_op(op.p, op.s)
    if x is None:
        raise ValidationError("max_pool needs the input vector to build its selection matrix")
    return max_pool_op(x, op.s, op.signed)[0]


def certified_norm(op: WidthOp) -> float:
    """Closed-form spectral norm of a width-change operator."""
    if op.kind in ("padding", "max_pool"):
        return 1.0
    if op.kind == "avg_pool":
        return math.sqrt(1.0 / op.s)
    return float(np.sqrt(np.sum(op.coeffs ** 2)))


def circulant_certificate(
    k: int, s: int, n: int, p: int, seed: int, tol: float = DEFAULT_TOL
) -> dict:
    """Measure ``||W||_2`` of an orthonormal-filter convolution against ``sqrt(k/s)``.

    ``pass`` records whether the measured norm equals ``sqrt(k/s)`` within
    ``tol`` (and, for ``n == k``, whether ``W^T W = (k/s) I``).  Row-selection
    only guarantees ``||W||_2 <= sqrt(k/s)``; equality is forced when ``n == k``
    or ``n + s > k``, reported as ``equality_forced``.
    """
    bank = orthonormalize_filters(n, k, seed, s)
    W = conv_weight(bank, p)
    est = spectral_norm(W, tol=tol * 1e-2, max_iter=100000, seed=seed)
    expected = math.sqrt(k / s)
    gram_residual = None
    if n == k:
        gram_residual = frobenius_norm(W.T @ W - (k / s) * np.eye(p))
    rel = abs(est.value - expected) / expected
    ok = rel <= tol and (gram_residual is None or gram_residual <= tol)
    return {
        "k": k,
        "s": s,
        "n": n,
        "p": p,
        "seed": seed,
        "spectral_norm": est.value,
        "expected": expected,
        "relative_error": rel,
        "gram_residual": gram_residual,
        "upper_bound_holds": bool(est.value <= expected * (1 + tol)),
        "equality_forced": bool(n == k or n + s > k),
        "iterations": est.iterations,
        "pass": bool(ok),
    }


def conv2d_certificate(bank2d, p_prev: int, s: int, tol: float = DEFAULT_TOL, seed: int = 0) -> dict:
    """Measured norm of a 2-D filter matrix next to the two stated normalizations.

    ``row_unit_bound`` is ``k/s`` (claimed when every filter row has unit norm);
    ``frobenius_target`` is the filter norm ``k/s`` under which a unit operator
    norm is claimed.  Both are reported, neither is assumed.
    """
    F = np.asarray(bank2d, dtype=np.float64)
    if F.ndim == 2:
        F = F[None]
    k = F.shape[1] ** 2
    W = conv_weight_2d(F, p_prev, s)
    est = spectral_norm(W, tol=tol, max_iter=100000, seed=seed) if np.any(W) else None
    measured = est.value if est is not None else 0.0
    row_norms = np.linalg.norm(F, axis=2)
    filt_norms = np.linalg.norm(F.reshape(F.shape[0], -1), axis=1)
    rows_unit = bool(np.all(np.abs(row_norms - 1.0) <= ORTHO_TOL))
    frob_target = bool(np.all(np.abs(filt_norms - k / s) <= ORTHO_TOL))
    return {
        "spectral_norm": measured,
        "row_unit_bound": k / s,
        "rows_unit_norm": rows_unit,
        "row_unit_bound_holds": measured <= k / s * (1 + tol),
        "frobenius_target": k / s,
        "filters_at_frobenius_target": frob_target,
        "unit_norm_holds": measured <= 1.0 + tol,
        "average_stride": s * s / k,
    }
