"""Kernel functions, Gram assembly, sphere sampling and sphere integrals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._accel import accelerated
from .linalg import INF, norm_index
from .rng import SeedLike, generator

EXPONENTIAL = "exponential"
RBF = "rbf"
EUCLIDEAN = "euclidean"
_FAMILIES = (EXPONENTIAL, RBF, EUCLIDEAN)


def default_bandwidth(dim: int, s=2) -> float:
    """RBF bandwidth ``(2 d_p)^(1/s)`` tied to the conjugate exponent ``s``."""
    s = norm_index(s)
    if s == INF:
        return 1.0
    return float((2.0 * dim) ** (1.0 / s))


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus its hyperparameters.

    ``kernel_temperature`` is the exponential-kernel temperature (named this
    way so it never collides with the bound constant ``gamma_bound``).
    ``bandwidth`` is the RBF length scale.  ``s`` is kept only to derive the
    default RBF bandwidth.
    """

    family: str
    kernel_temperature: float = 1.0
    bandwidth: float = 1.0
    dim: Optional[int] = None
    s: float = 2

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.kernel_temperature > 0:
            raise ValueError("kernel_temperature must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @classmethod
    def exponential(cls, temperature: float = 1.0, dim: Optional[int] = None) -> "KernelSpec":
        return cls(EXPONENTIAL, kernel_temperature=float(temperature), dim=dim)

    @classmethod
    def rbf(cls, dim: int, s=2, bandwidth: Optional[float] = None) -> "KernelSpec":
        """Gaussian RBF; the bandwidth defaults to ``(2 dim)^(1/s)``."""
        bw = default_bandwidth(dim, s) if bandwidth is None else float(bandwidth)
        return cls(RBF, bandwidth=bw, dim=int(dim), s=norm_index(s))

    @classmethod
    def euclidean(cls, dim: Optional[int] = None) -> "KernelSpec":
        return cls(EUCLIDEAN, dim=dim)

    def check_dim(self, n: int) -> None:
        if self.dim is not None and n != self.dim:
            raise ValueError(f"kernel expects dimension {self.dim}, got {n}")


def _sqdist_numpy(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    a2 = np.sum(A * A, axis=1)
    b2 = np.sum(B * B, axis=1)
    D = a2[:, None] + b2[None, :] - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    return D


@accelerated(_sqdist_numpy)
def sqdist(A, B):
    """Pairwise squared Euclidean distances between rows of ``A`` and ``B``."""
    n, m, d = A.shape[0], B.shape[0], A.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = A[i, k] - B[j, k]
                acc += diff * diff
            out[i, j] = acc
    return out


def _rows(M, name: str) -> np.ndarray:
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name} must be a nonempty 2-D array")
    return np.ascontiguousarray(arr)


def cross_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    """Kernel matrix ``[k(a_i, b_j)]`` between the rows of ``A`` and ``B``."""
    A = _rows(A, "A")
    B = _rows(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    spec.check_dim(A.shape[1])
    if spec.family == EUCLIDEAN:
        return A @ B.T
    if spec.family == EXPONENTIAL:
        return np.exp((A @ B.T) / spec.kernel_temperature)
    return np.exp(-sqdist(A, B) / (2.0 * spec.bandwidth**2))


def kernel_eval(spec: KernelSpec, a, b) -> float:
    """Kernel value ``k(a, b)`` for two vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    spec.check_dim(a.size)
    if spec.family == EUCLIDEAN:
        return float(a @ b)
    if spec.family == EXPONENTIAL:
        return float(math.exp(float(a @ b) / spec.kernel_temperature))
    diff = a - b
    return float(math.exp(-float(diff @ diff) / (2.0 * spec.bandwidth**2)))


def gram(spec: KernelSpec, K) -> np.ndarray:
    """Symmetric Gram matrix ``[k(k_i, k_j)]``."""
    K = _rows(K, "K")
    G = cross_matrix(spec, K, K)
    G = 0.5 * (G + G.T)
    if spec.family == RBF:
        np.fill_diagonal(G, 1.0)
    return G


def cross(spec: KernelSpec, K, q) -> np.ndarray:
    """Vector ``(k(k_l, q))_l`` of length L."""
    K = _rows(K, "K")
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.size != K.shape[1]:
        raise ValueError(f"query has dimension {q.size}, keys have {K.shape[1]}")
    return cross_matrix(spec, K, q[None, :])[:, 0]


def log_scores(spec: KernelSpec, K, Q) -> np.ndarray:
    """Logarithm of the kernel scores for the positive families, shape (L_q, L_k)."""
    K = _rows(K, "K")
    Q = _rows(Q, "Q")
    if spec.family == EXPONENTIAL:
        return (Q @ K.T) / spec.kernel_temperature
    if spec.family == RBF:
        return -sqdist(Q, K) / (2.0 * spec.bandwidth**2)
    raise ValueError("log scores are only defined for positive kernels (exponential, rbf)")


# ---------------------------------------------------------------------------
# Sphere sampling and integrals
# ---------------------------------------------------------------------------


def sphere_sample(dim: int, n: int, seed: SeedLike) -> np.ndarray:
    """``n`` points drawn uniformly from the unit sphere in ``R^dim``."""
    if dim < 2:
        raise ValueError("dim must be at least 2")
    if n < 1:
        raise ValueError("n must be at least 1")
    g = generator(seed).standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g


def _exp_weights_numpy(S, centers, coef, temperature):
    return np.exp((S @ centers.T) / temperature) @ coef


@accelerated(_exp_weights_numpy)
def exp_weights(S, centers, coef, temperature):
    """``w_j = sum_l coef_l exp(<s_j, c_l> / temperature)`` for every row of S."""
    n, L, d = S.shape[0], centers.shape[0], S.shape[1]
    out = np.empty(n)
    for j in range(n):
        acc = 0.0
        for l in range(L):
            dot = 0.0
            for k in range(d):
                dot += S[j, k] * centers[l, k]
            acc += coef[l] * np.exp(dot / temperature)
        out[j] = acc
    return out


@dataclass(frozen=True)
class SphereIntegral:
    """Monte-Carlo estimate of the sphere average of ``a exp(a^T b / gamma)``.

    ``coefficient`` is the component along ``b``; ``residual`` is the norm of
    the component orthogonal to ``b``.  Both come with standard errors:
    ``residual_se`` is the root of the summed per-coordinate variances of the
    orthogonal part, i.e. the typical residual norm under pure noise.
    """

    coefficient: float
    coefficient_se: float
    residual: float
    residual_se: float
    n: int


def sphere_integral_check(temperature: float, b, n: int, seed: SeedLike) -> SphereIntegral:
    """Estimate the sphere average of ``a exp(a^T b / temperature)``.

    The average is normalized by the sphere's surface area, so the exact
    value is ``C b`` with ``C`` depending only on dimension and temperature.
    """
    b = np.asarray(b, dtype=np.float64).ravel()
    if abs(np.linalg.norm(b) - 1.0) > 1e-12:
        raise ValueError("b must be a unit vector")
    A = sphere_sample(b.size, n, seed)
    w = exp_weights(A, b[None, :], np.ones(1), float(temperature))
    proj = A @ b
    par = proj * w
    orth = (A - proj[:, None] * b[None, :]) * w[:, None]
    coef = float(np.mean(par))
    coef_se = float(np.std(par, ddof=1) / math.sqrt(n))
    orth_mean = np.mean(orth, axis=0)
    orth_var = np.var(orth, axis=0, ddof=1) / n
    return SphereIntegral(
        coefficient=coef,
        coefficient_se=coef_se,
        residual=float(np.linalg.norm(orth_mean)),
        residual_se=float(math.sqrt(np.sum(orth_var))),
        n=int(n),
    )
