"""Synthetic latent-variable data, posterior oracles and conditional KDE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec, cross, exp_weights, gram, sphere_sample
from .linalg import spd_solve
from .rng import SeedLike, child, generator

FRESH = "fresh"
REPEAT_FIRST = "repeat_first"


@dataclass(frozen=True)
class LatentModelSpec:
    """Finite-dimensional latent model ``r = z c(x) + eps``.

    Tokens ``x`` are standard normal in ``R^d``.  The covariate map is
    ``c(x) = tanh(P x)`` with ``P`` (``d_c x d``, entries N(0, 1/d)) drawn
    once from ``map_seed``.  The latent ``z`` is ``d_r x d_c`` with i.i.d.
    N(0, prior_scale) entries, so ``prior_scale`` is the entry variance.

    ``mask_mode`` selects the masked query token: ``"fresh"`` draws a new
    token, ``"repeat_first"`` reuses the first token (handy for checks).
    """

    d: int = 4
    d_c: int = 3
    d_r: int = 2
    L: int = 16
    prior_scale: float = 1.0
    noise: float = 0.1
    map_seed: int = 0
    mask_mode: str = FRESH

    def __post_init__(self):
        if not self.prior_scale > 0:
            raise ValueError("prior_scale must be positive")
        if not self.noise > 0:
            raise ValueError("noise must be positive")
        if min(self.d, self.d_c, self.d_r, self.L) < 1:
            raise ValueError("dimensions and L must be positive")
        if self.mask_mode not in (FRESH, REPEAT_FIRST):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")

    def projection(self) -> np.ndarray:
        g = generator(self.map_seed)
        return g.standard_normal((self.d_c, self.d)) / math.sqrt(self.d)

    def covariates(self, X) -> np.ndarray:
        """Apply ``c(x) = tanh(P x)`` row-wise."""
        return np.tanh(np.asarray(X, dtype=np.float64) @ self.projection().T)


@dataclass
class Episode:
    """One sampled sequence with its latent and the masked target."""

    X: np.ndarray          # tokens, L x d
    C: np.ndarray          # covariates, L x d_c
    R: np.ndarray          # responses, L x d_r
    z: np.ndarray          # latent, d_r x d_c
    mask_token: np.ndarray  # d
    c_mask: np.ndarray     # d_c
    y: np.ndarray          # masked response, d_r
    diagnostics: dict = field(default_factory=dict)


def sample_episode(spec: LatentModelSpec, seed: SeedLike) -> Episode:
    """Draw one episode from the latent model."""
    g = generator(seed)
    P = spec.projection()
    X = g.standard_normal((spec.L, spec.d))
    z = g.normal(0.0, math.sqrt(spec.prior_scale), size=(spec.d_r, spec.d_c))
    C = np.tanh(X @ P.T)
    R = C @ z.T + spec.noise * g.standard_normal((spec.L, spec.d_r))
    if spec.mask_mode == REPEAT_FIRST:
        mask_token = X[0].copy()
        c_mask = C[0].copy()
    else:
        mask_token = g.standard_normal(spec.d)
        c_mask = np.tanh(P @ mask_token)
    y = z @ c_mask + spec.noise * g.standard_normal(spec.d_r)
    return Episode(X=X, C=C, R=R, z=z, mask_token=mask_token, c_mask=c_mask, y=y)


def sample_episodes(spec: LatentModelSpec, n: int, seed: SeedLike) -> list:
    """``n`` episodes, episode ``i`` seeded by child ``i`` of ``seed``."""
    return [sample_episode(spec, child(seed, i)) for i in range(n)]


def posterior_mean_z(C, R, lam: float) -> np.ndarray:
    """Posterior mean of the latent, ``R^T (C C^T + lam I)^{-1} C`` (L x L solve)."""
    C = np.asarray(C, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if C.ndim != 2 or R.ndim != 2 or C.shape[0] != R.shape[0]:
        raise ValueError("C and R must be 2-D with the same number of rows")
    if not lam > 0:
        raise ValueError("lam must be positive")
    return R.T @ spd_solve(C @ C.T, C, ridge=lam)


def posterior_mean_z_primal(C, R, lam: float) -> np.ndarray:
    """Same posterior mean through the d_c x d_c system ``R^T C (C^T C + lam I)^{-1}``."""
    C = np.asarray(C, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    return spd_solve(C.T @ C, C.T @ R, ridge=lam).T


def posterior_cov_vec_z(C, lam: float, noise: float, d_r: int) -> np.ndarray:
    """Exact posterior covariance of ``vec(z)`` (diagnostic only).

    With prior variance ``noise^2 / lam`` per entry (the scaling under which
    the posterior mean is the ridge solution above), the covariance is
    ``I_{d_r} (x) noise^2 (C^T C + lam I)^{-1}``.
    """
    C = np.asarray(C, dtype=np.float64)
    inner = noise**2 * np.linalg.inv(C.T @ C + lam * np.eye(C.shape[1]))
    return np.kron(np.eye(d_r), inner)


def predict_mask(z_bar, c_mask) -> np.ndarray:
    """Point prediction ``z_bar c_mask`` of the masked response."""
    z_bar = np.asarray(z_bar, dtype=np.float64)
    c_mask = np.asarray(c_mask, dtype=np.float64).ravel()
    if z_bar.ndim != 2 or z_bar.shape[1] != c_mask.size:
        raise ValueError("z_bar columns must match c_mask length")
    return z_bar @ c_mask


# ---------------------------------------------------------------------------
# Gaussian-process view
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GPModelSpec:
    kernel: KernelSpec
    noise: float

    def __post_init__(self):
        if not self.noise > 0:
            raise ValueError("GP noise must be positive")


def gp_posterior(spec: GPModelSpec, X, Y, x):
    """Posterior mean and variance at ``x`` given observations ``(X, Y)``.

    Returns ``(mean, var)`` with ``mean = k(x, X)(K + noise I)^{-1} Y`` and
    ``var = k(x, x) - k(x, X)(K + noise I)^{-1} k(X, x)`` clamped at zero.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] < 1 or Y.shape[0] != X.shape[0]:
        raise ValueError("X and Y must have the same positive number of rows")
    x = np.asarray(x, dtype=np.float64).ravel()
    K = gram(spec.kernel, X)
    kx = cross(spec.kernel, X, x)
    alpha = spd_solve(K, Y, ridge=spec.noise)
    mean = kx @ alpha
    beta = spd_solve(K, kx, ridge=spec.noise)
    kxx = float(gram(spec.kernel, x[None, :])[0, 0])
    var = kxx - float(kx @ beta)
    if var < -1e-10:
        raise ArithmeticError(f"posterior variance {var:.3e} is materially negative")
    return mean, max(var, 0.0)


# ---------------------------------------------------------------------------
# Conditional kernel density on the sphere
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KDEMean:
    """Self-normalized Monte-Carlo estimate of the conditional KDE mean.

    ``mean`` is the estimate, ``cov`` its delta-method covariance (d x d).
    """

    mean: np.ndarray
    cov: np.ndarray
    n_mc: int

    def projection(self, direction) -> tuple:
        """Component along ``direction`` and its standard error."""
        u = np.asarray(direction, dtype=np.float64)
        u = u / np.linalg.norm(u)
        return float(self.mean @ u), float(math.sqrt(max(u @ self.cov @ u, 0.0)))


def cond_kde_mean(q, K, V, temperature: float, n_mc: int, seed: SeedLike) -> KDEMean:
    """Mean of the conditional KDE ``p(v | q)`` built from exponential kernels.

    ``p(v | q)`` is proportional to ``sum_l k(k_l, q) k(v_l, v)``.  The
    integral over the sphere is estimated with ``n_mc`` uniform sphere
    samples and self-normalized weights, so the density normalizer never
    has to be computed.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    K = np.asarray(K, dtype=np.float64)
    V = np.ascontiguousarray(np.asarray(V, dtype=np.float64))
    for name, arr in (("q", q[None, :]), ("K", K), ("V", V)):
        if np.max(np.abs(np.linalg.norm(arr, axis=1) - 1.0)) > 1e-9:
            raise ValueError(f"{name} rows must lie on the unit sphere")
    if K.shape[0] != V.shape[0]:
        raise ValueError("K and V must have the same number of rows")
    spec = KernelSpec.exponential(temperature)
    a = cross(spec, K, q)
    a = a / np.sum(a)
    S = sphere_sample(V.shape[1], n_mc, seed)
    w = exp_weights(S, V, a, float(temperature))
    wsum = float(np.sum(w))
    mean = (w @ S) / wsum
    centered = (S - mean) * (w / wsum)[:, None]
    cov = centered.T @ centered
    return KDEMean(mean=mean, cov=cov, n_mc=int(n_mc))
