"""Dense matrix helpers: SPD solves, matrix (r, s)-norms and operator norms.

Norm indices are restricted to ``1``, ``2`` and ``math.inf``.  Throughout the
package a matrix (r, s)-norm is taken column-wise: the r-norm of every
column, then the s-norm of the resulting vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import scipy.linalg

INF = math.inf
_ALLOWED = (1, 2, INF)


class NotSymmetricError(ValueError):
    """Raised when a matrix expected to be symmetric is not."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization breaks down."""


class PowerIterationError(RuntimeError):
    """Raised when power iteration hits its iteration cap.

    The ``diagnostics`` attribute carries the last estimate, the relative
    residual and the iteration count.
    """

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def norm_index(r) -> float:
    """Normalize a norm index, accepting ``"inf"`` and ``np.inf``."""
    if isinstance(r, str):
        key = r.strip().lower()
        if key in ("inf", "infinity", "oo"):
            return INF
        r = float(key)
    value = float(r)
    if value not in _ALLOWED:
        raise ValueError(f"unsupported norm index {r!r}; use 1, 2 or inf")
    return INF if math.isinf(value) else int(value)


@dataclass(frozen=True)
class ConjugatePair:
    """Conjugate exponents with 1/r + 1/s = 1."""

    r: float = 2
    s: float = 2

    def __post_init__(self):
        r, s = norm_index(self.r), norm_index(self.s)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "s", s)
        if not math.isclose(_inv(r) + _inv(s), 1.0):
            raise ValueError(f"({r}, {s}) is not a conjugate pair")

    @classmethod
    def from_r(cls, r) -> "ConjugatePair":
        r = norm_index(r)
        s = {1: INF, 2: 2, INF: 1}[r]
        return cls(r, s)

    def label(self) -> str:
        return f"({_label(self.r)},{_label(self.s)})"


def _inv(p: float) -> float:
    return 0.0 if math.isinf(p) else 1.0 / p


def _label(p: float) -> str:
    return "inf" if math.isinf(p) else str(int(p))


PairLike = Union[ConjugatePair, Tuple[float, float]]


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Validate a dense 2-D finite float array."""
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def vec_norm(v, r) -> float:
    """Vector r-norm for r in {1, 2, inf}."""
    r = norm_index(r)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    if r == 1:
        return float(np.sum(np.abs(v)))
    if r == 2:
        return float(np.sqrt(np.dot(v, v)))
    return float(np.max(np.abs(v)))


def column_norms(M, r) -> np.ndarray:
    """r-norm of every column of ``M``."""
    r = norm_index(r)
    A = np.asarray(M, dtype=np.float64)
    if r == 1:
        return np.sum(np.abs(A), axis=0)
    if r == 2:
        return np.sqrt(np.sum(A * A, axis=0))
    return np.max(np.abs(A), axis=0)


def norm_rs(M, pair: PairLike) -> float:
    """Matrix (r, s)-norm: the s-norm of the vector of column r-norms.

    ``pair`` may be a :class:`ConjugatePair` or any tuple ``(r, s)`` with both
    entries in {1, 2, inf}; the (r, inf) norm is the largest column r-norm.
    """
    r, s = (pair.r, pair.s) if isinstance(pair, ConjugatePair) else pair
    A = as_matrix(M)
    return vec_norm(column_norms(A, r), s)


def op_norm(M, r, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Operator norm induced by the vector r-norm.

    r = 1 gives the largest absolute column sum, r = inf the largest absolute
    row sum, and r = 2 the spectral norm computed by power iteration on
    ``M^T M``.  Power iteration stops once the eigen-residual
    ``||G v - lam v||`` falls below ``tol * lam``.
    """
    r = norm_index(r)
    A = as_matrix(M)
    if r == 1:
        return float(np.max(np.sum(np.abs(A), axis=0)))
    if r == INF:
        return float(np.max(np.sum(np.abs(A), axis=1)))
    return spectral_norm(A, tol=tol, max_iter=max_iter)


def spectral_norm(M, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest singular value of ``M`` by power iteration on the Gram matrix."""
    A = as_matrix(M)
    G = A.T @ A if A.shape[0] >= A.shape[1] else A @ A.T
    n = G.shape[0]
    scale = float(np.max(np.abs(G)))
    if scale == 0.0:
        return 0.0
    G = G / scale
    # Fixed, generic start vector: deterministic yet almost surely not
    # orthogonal to the leading eigenvector.
    v = 1.0 + 0.5 * np.sin(np.arange(1, n + 1) * 1.6180339887)
    v /= np.linalg.norm(v)
    lam = 0.0
    rel_res = np.inf
    for it in range(1, max_iter + 1):
        w = G @ v
        lam = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        rel_res = float(np.linalg.norm(w - lam * v)) / max(abs(lam), np.finfo(float).tiny)
        v = w / nw
        if rel_res <= tol:
            lam = float(v @ (G @ v))
            return float(np.sqrt(max(lam, 0.0) * scale))
    raise PowerIterationError(
        f"power iteration did not converge in {max_iter} iterations",
        {"estimate": float(np.sqrt(max(lam, 0.0) * scale)), "relative_residual": rel_res,
         "iterations": max_iter},
    )


def spd_solve(A, B, ridge: float = 0.0, check_residual: bool = True) -> np.ndarray:
    """Solve ``(A + ridge I) X = B`` for symmetric positive definite ``A + ridge I``.

    Parameters
    ----------
    A : (n, n) array
        Symmetric matrix.  Symmetry is checked to a relative 1e-12.
    B : (n,) or (n, m) array
        Right-hand side(s).
    ridge : float
        Nonnegative shift added to the diagonal before factorization.
    check_residual : bool
        Verify ``||(A + ridge I) X - B||_F <= 1e-10 ||B||_F`` after solving.

    Returns
    -------
    X : array with the shape of ``B``

    Raises
    ------
    NotSymmetricError
        If ``A`` is not symmetric.
    NotPositiveDefiniteError
        If the Cholesky factorization fails or the residual check fails.
    """
    A = as_matrix(A, "A")
    n = A.shape[0]
    if A.shape[1] != n:
        raise ValueError(f"A must be square, got {A.shape}")
    if ridge < 0 or not np.isfinite(ridge):
        raise ValueError("ridge must be a finite nonnegative number")
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != n:
        raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
    asym = float(np.max(np.abs(A - A.T)))
    if asym > 1e-12 * max(1.0, float(np.max(np.abs(A)))):
        raise NotSymmetricError(f"A is not symmetric (max |A - A^T| = {asym:.3e})")
    S = A + ridge * np.eye(n)
    try:
        factor = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"Cholesky factorization failed: {exc}") from exc
    X = scipy.linalg.cho_solve(factor, B, check_finite=False)
    if check_residual:
        res = float(np.linalg.norm(S @ X - B))
        ref = float(np.linalg.norm(B))
        if res > 1e-10 * max(ref, np.finfo(float).tiny) and ref > 0:
            # One step of iterative refinement before giving up.
            X = X + scipy.linalg.cho_solve(factor, B - S @ X, check_finite=False)
            res = float(np.linalg.norm(S @ X - B))
            if res > 1e-10 * ref:
                raise NotPositiveDefiniteError(
                    f"solve residual {res:.3e} exceeds 1e-10 * ||B|| = {1e-10 * ref:.3e}"
                )
    return X
