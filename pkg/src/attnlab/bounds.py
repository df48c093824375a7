"""Norm-based constants, covering numbers and generalization bounds.

All arithmetic is plain Python floating point evaluated in a fixed order,
so that an independent re-evaluation written the same way reproduces every
value exactly.  None of the formulas takes the sequence length as input.

Conventions
-----------
* A ratio ``a / b`` with ``b == 0`` is ``+inf`` when ``a > 0`` and ``0`` when
  ``a == 0`` (the limit convention used for the kappa components).
* Empty products equal one and empty sums equal zero.
* The reported bound is the explicit expression obtained along the proof
  (label ``"proof-exact"``); the theorem statement hides further absolute
  constants inside big-O notation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .linalg import INF, ConjugatePair, norm_rs
from .transformer import LayerBudget, NormBudget

LABEL = "proof-exact"
SQRT2 = math.sqrt(2.0)


def safe_ratio(num: float, den: float) -> float:
    """``num / den`` with the 0/0 = 0 and x/0 = inf conventions."""
    if den == 0.0:
        return 0.0 if num == 0.0 else INF
    return num / den


def _log1p_ratio(num: float, den: float) -> float:
    return math.log1p(safe_ratio(num, den))


# ---------------------------------------------------------------------------
# Per-layer constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerConstants:
    omega_v: float
    omega_qk: float
    R_v: float
    R_qk: float
    alpha_tilde: float
    omega_tilde_v: float
    gamma: float
    kappa: float
    zeta: float
    ffn_coef: float  # alpha_x R_sigma + alpha_sigma R_x


def constants_for(layer: LayerBudget) -> LayerConstants:
    omega_v = 0.0
    R_v = 0.0
    R_qk = 0.0
    omega_qk = 0.0
    for i in range(layer.h):
        omega_v = omega_v + layer.omega_v[i]
        R_v = R_v + layer.R_v[i]
        R_qk = R_qk + (layer.R_q[i] + layer.R_k[i])
        omega_qk = max(omega_qk, layer.omega_q[i] + layer.omega_k[i])
    alpha_tilde = 1.0 + layer.alpha_x * layer.alpha_sigma
    omega_tilde_v = 1.0 + omega_v
    gamma = max(alpha_tilde, omega_tilde_v)
    ffn_coef = layer.alpha_x * layer.R_sigma + layer.alpha_sigma * layer.R_x
    kappa = max(
        safe_ratio(ffn_coef, alpha_tilde),
        safe_ratio(R_v, omega_tilde_v),
        safe_ratio(R_qk, omega_qk * omega_v),
    )
    zeta = omega_qk * omega_qk * R_v / omega_tilde_v
    return LayerConstants(omega_v, omega_qk, R_v, R_qk, alpha_tilde, omega_tilde_v, gamma, kappa,
                          zeta, ffn_coef)


def layer_constants(norms: NormBudget) -> List[LayerConstants]:
    """Combine per-head norms into the per-layer constants of every layer."""
    for layer in norms.layers:
        for _, _, v in layer.items():
            if not (v >= 0.0):
                raise ValueError("norm bounds must be nonnegative")
    return [constants_for(layer) for layer in norms.layers]


# ---------------------------------------------------------------------------
# Radii
# ---------------------------------------------------------------------------


def data_radius(Xs: Iterable, pair: Optional[ConjugatePair] = None) -> float:
    """``R^(0) = max_i ||X_i^T||_{r, inf}`` (the largest token r-norm)."""
    pair = pair or ConjugatePair()
    best = None
    for X in Xs:
        v = norm_rs(np.asarray(X, dtype=np.float64).T, (pair.r, INF))
        best = v if best is None else max(best, v)
    if best is None:
        raise ValueError("dataset must be nonempty")
    return best


@dataclass(frozen=True)
class Radii:
    R: List[float]           # R^(0..T)
    rho_tilde: List[float]   # per layer
    R_mha: List[float]       # per layer
    R_trans: float


def _tail_product(values: Sequence[float], start: int) -> float:
    prod = 1.0
    for v in values[start:]:
        prod = prod * v
    return prod


def radii(consts: Sequence[LayerConstants], R0: float) -> Radii:
    """Inter-layer magnitudes and the transformer covering coefficient."""
    if R0 < 0:
        raise ValueError("R0 must be nonnegative")
    T = len(consts)
    R = [float(R0)]
    for c in consts:
        R.append(R[-1] * (c.omega_tilde_v * c.alpha_tilde))
    rho = []
    rmha = []
    for t, c in enumerate(consts):
        R2 = R[t] * R[t]
        rho.append(c.omega_tilde_v + c.omega_qk * c.omega_qk * c.omega_v * R2)
        rmha.append(c.R_v + c.omega_qk * c.R_qk * R2)
    growth = [rho[t] / consts[t].omega_tilde_v for t in range(T)]
    total = 0.0
    for t in range(T - 1):
        total = total + (rmha[t] / rho[t]) * _tail_product(growth, t + 1)
    for t in range(T):
        total = total + (consts[t].ffn_coef / consts[t].alpha_tilde) * _tail_product(growth, t + 1)
    return Radii(R, rho, rmha, total)


# ---------------------------------------------------------------------------
# Covering numbers
# ---------------------------------------------------------------------------


def matrix_ball_log_cover(d1: int, d2: int, R_M: float, eps: float) -> float:
    """``d1 d2 log(1 + 2 R_M / eps)`` for an (r, s)-norm ball of radius ``R_M``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return d1 * d2 * math.log1p(2.0 * R_M / eps)


def ffn_log_cover(d: int, d_sigma: int, ffn_coef: float, R_star: float, eps: float) -> float:
    """``2 d d_sigma log(1 + 2 (alpha_x R_sigma + alpha_sigma R_x) R_star / eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return 2 * d * d_sigma * math.log1p(2.0 * ffn_coef * R_star / eps)


def mha_log_cover(d: int, h: int, R_tilde: float, R_mha: float, eps: float) -> float:
    """``(2 + h) d^2 log(1 + 2 R_tilde R_mha / eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return (2 + h) * d * d * math.log1p(2.0 * R_tilde * R_mha / eps)


def covering_bound(D: int, h: int, T: int, R_T: float, R_trans: float, eps: float) -> float:
    """``(4 + h) D^2 T log(1 + 2 R^(T) R_trans / eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return (4 + h) * D * D * T * math.log1p(2.0 * R_T * R_trans / eps)


@dataclass(frozen=True)
class Propagation:
    """Resolution split across layers and the resulting sub-bounds."""

    eps_layer: List[float]
    eps_ffn: List[float]
    eps_mha: List[float]          # length T - 1
    ffn_bounds: List[float]
    mha_bounds: List[float]
    total: float
    closed_form: float
    propagated_eps: float         # the resolution the split actually certifies
    propagated_ratio: float       # propagated_eps / eps


def propagation(consts: Sequence[LayerConstants], rad: Radii, d: int, d_sigma: int, h: int, D: int,
                eps: float) -> Propagation:
    """Split ``eps`` over layers so that every sub-bound has the argument
    ``2 R^(T) R_trans / eps``.

    The FFN of layer t covers at ``eps_t * ffn_coef / (omega_tilde alpha_tilde)``
    with input radius ``R^(t)``, and the MHA of layer t covers at
    ``eps_t * R_mha / omega_tilde`` with input radius ``alpha_tilde R^(t)``,
    where ``eps_t = eps / (R_trans prod_{tau > t} omega_tilde alpha_tilde)``.
    The sum of sub-bounds never exceeds the closed form because
    ``2 d d_sigma T + (2 + h) d^2 (T - 1) <= (4 + h) D^2 T``.

    ``propagated_eps`` re-evaluates the layer-wise resolution sum with the
    split above; its ratio to ``eps`` measures how far the printed
    ``R_trans`` is from certifying the requested resolution.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    T = len(consts)
    if rad.R_trans == 0.0:
        raise ValueError("R_trans is zero: every function in the class coincides")
    step = [c.omega_tilde_v * c.alpha_tilde for c in consts]
    eps_layer = [eps / (rad.R_trans * _tail_product(step, t + 1)) for t in range(T)]
    eps_ffn = [eps_layer[t] * consts[t].ffn_coef / step[t] for t in range(T)]
    eps_mha = [eps_layer[t] * rad.R_mha[t] / consts[t].omega_tilde_v for t in range(T - 1)]
    ffn_b = [ffn_log_cover(d, d_sigma, consts[t].ffn_coef, rad.R[t], eps_ffn[t]) if eps_ffn[t] > 0 else 0.0
             for t in range(T)]
    mha_b = [mha_log_cover(d, h, consts[t].alpha_tilde * rad.R[t], rad.R_mha[t], eps_mha[t])
             if eps_mha[t] > 0 else 0.0 for t in range(T - 1)]
    total = 0.0
    for v in ffn_b + mha_b:
        total = total + v
    amp = [rad.rho_tilde[t] * consts[t].alpha_tilde for t in range(T)]
    prop = 0.0
    for t in range(T):
        prop = prop + rad.rho_tilde[t] * eps_ffn[t] * _tail_product(amp, t + 1)
    for t in range(T - 1):
        prop = prop + eps_mha[t] * _tail_product(amp, t + 1)
    closed = covering_bound(D, h, T, rad.R[T], rad.R_trans, eps)
    return Propagation(eps_layer, eps_ffn, eps_mha, ffn_b, mha_b, total, closed, prop, prop / eps)


# ---------------------------------------------------------------------------
# Rademacher and generalization bounds
# ---------------------------------------------------------------------------


def rademacher_term(D: int, h: int, T: int, R_T: float, R_trans: float, n: int) -> float:
    """Per-output bound ``12 D sqrt((4+h) T) (2 sqrt2 + sqrt(log(1 + 2 R^(T) R_trans))) / (2 sqrt n)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return 12.0 * D * math.sqrt((4 + h) * T) * (2.0 * SQRT2 + math.sqrt(math.log1p(2.0 * R_T * R_trans))) \
        / (2.0 * math.sqrt(n))


def generalization_gap(rademacher: Sequence[float], n: int, delta: float) -> float:
    """``2 sqrt2 sum_j R_j + 3 sqrt(log(2/delta) / (2n))``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    total = 0.0
    for r in rademacher:
        total = total + r
    return 2.0 * SQRT2 * total + 3.0 * math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def dudley_numeric(D: int, h: int, T: int, R_T: float, R_trans: float, n: int) -> float:
    """Numerical infimum over xi of ``4 xi + 12/sqrt(n) int_xi^{1/2} sqrt(log N(eps)) deps``."""
    from scipy.integrate import quad
    from scipy.optimize import minimize_scalar

    scale = (4 + h) * D * D * T
    a = 2.0 * R_T * R_trans
    if a == 0.0:
        return 0.0

    def integrand(e):
        return math.sqrt(scale * math.log1p(a / e))

    def objective(xi):
        val, _ = quad(integrand, xi, 0.5, limit=200)
        return 4.0 * xi + 12.0 / math.sqrt(n) * val

    res = minimize_scalar(objective, bounds=(1e-12, 0.5), method="bounded",
                          options={"xatol": 1e-10})
    return float(min(res.fun, objective(1e-12), objective(0.5)))


def simplified_form(T: int, gamma: float, zeta: float, kappa: float, R0: float) -> float:
    """``T sqrt(log(1+gamma)) + sqrt(T) sqrt(log(1 + zeta R0)) + sqrt(log(1 + kappa/zeta))``."""
    return (T * math.sqrt(math.log1p(gamma)) + math.sqrt(T) * math.sqrt(math.log1p(zeta * R0))
            + math.sqrt(_log1p_ratio(kappa, zeta)))


def simplify_intermediate(T: int, gamma: float, zeta: float, kappa: float, R0: float) -> float:
    """Rigorous upper bound on ``R^(T) R_trans`` along the simplification argument:
    ``2 kappa R0 (1+gamma)^(2T) T A^(T-1)`` with ``A = 1 + zeta R0^2 (1+gamma)^(4T)``.
    """
    A = 1.0 + zeta * R0 * R0 * (1.0 + gamma) ** (4 * T)
    return 2.0 * kappa * R0 * (1.0 + gamma) ** (2 * T) * T * A ** (T - 1)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

LAYER_FIELDS = ("omega_v", "omega_qk", "R_v", "R_qk", "alpha_tilde", "omega_tilde_v", "gamma",
                "kappa", "zeta", "R_t", "rho_tilde", "R_mha")
GLOBAL_FIELDS = ("R0", "RT", "R_trans", "gamma", "kappa", "zeta", "log_cover", "rademacher",
                 "gen_bound", "simplified", "simplify_ratio", "dudley_numeric")
# The global gamma, kappa and zeta are maxima over layers; their CSV columns
# carry a suffix so that no header name appears twice.
GLOBAL_COLUMNS = tuple(k + "_max" if k in LAYER_FIELDS else k for k in GLOBAL_FIELDS)


@dataclass
class BoundReport:
    layers: List[Dict[str, float]]
    globals: Dict[str, float]
    setting: Dict[str, float] = field(default_factory=dict)
    label: str = LABEL

    def csv_rows(self) -> List[List[str]]:
        header = ["scope", "t"] + list(LAYER_FIELDS) + list(GLOBAL_COLUMNS)
        rows = [header]
        for t, row in enumerate(self.layers):
            rows.append(["layer", str(t)] + [_fmt(row[k]) for k in LAYER_FIELDS] + [""] * len(GLOBAL_FIELDS))
        rows.append(["global", ""] + [""] * len(LAYER_FIELDS) + [_fmt(self.globals[k]) for k in GLOBAL_FIELDS])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# schema=1\n")
        buf.write("# label=" + self.label + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerows(self.csv_rows())
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"Bound report ({self.label})"]
        for k in sorted(self.setting):
            lines.append(f"  {k} = {_fmt(self.setting[k])}")
        for t, row in enumerate(self.layers):
            lines.append(f"layer {t}:")
            for k in LAYER_FIELDS:
                lines.append(f"  {k:14s} {_fmt(row[k])}")
        lines.append("global:")
        for k in GLOBAL_FIELDS:
            lines.append(f"  {k:14s} {_fmt(self.globals[k])}")
        lines.append("note: kappa components with a zero denominator are inf (0 when the numerator is 0 too)")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def bound_report(norms: NormBudget, R0: float, d: int, d_sigma: int, d_p: int, d_y: int, n: int,
                 delta: float = 0.05, eps: float = 1.0, with_dudley: bool = False) -> BoundReport:
    """Evaluate every constant and bound for a norm budget and data radius."""
    consts = layer_constants(norms)
    rad = radii(consts, R0)
    T = len(consts)
    h = norms.layers[0].h
    D = max(d, d_sigma, d_p, d_y)
    gamma = max(c.gamma for c in consts)
    kappa = max(c.kappa for c in consts)
    zeta = max(c.zeta for c in consts)
    RT = rad.R[T]
    rad_term = rademacher_term(D, h, T, RT, rad.R_trans, n)
    gen = generalization_gap([rad_term] * d_y, n, delta)
    simp = simplified_form(T, gamma, zeta, kappa, R0)
    lhs = math.sqrt(math.log1p(RT * rad.R_trans))
    layers = []
    for t, c in enumerate(consts):
        row = asdict(c)
        row.pop("ffn_coef")
        row["R_t"] = rad.R[t]
        row["rho_tilde"] = rad.rho_tilde[t]
        row["R_mha"] = rad.R_mha[t]
        layers.append(row)
    glob = {
        "R0": float(R0), "RT": RT, "R_trans": rad.R_trans, "gamma": gamma, "kappa": kappa, "zeta": zeta,
        "log_cover": covering_bound(D, h, T, RT, rad.R_trans, eps),
        "rademacher": rad_term, "gen_bound": gen, "simplified": simp,
        "simplify_ratio": safe_ratio(lhs, simp),
        "dudley_numeric": dudley_numeric(D, h, T, RT, rad.R_trans, n) if with_dudley else float("nan"),
    }
    setting = {"T": T, "h": h, "D": D, "d_y": d_y, "n": n, "delta": delta, "eps": eps}
    return BoundReport(layers, glob, setting)


# ---------------------------------------------------------------------------
# Empirical Rademacher complexity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RademacherEstimate:
    """Per-output estimates and standard errors over sign draws."""

    estimate: np.ndarray
    std_error: np.ndarray
    n_params: int
    n_signs: int


def canonical_order(X: np.ndarray) -> np.ndarray:
    """Lexicographic order of the flattened sequences (makes estimates order-free)."""
    flat = np.asarray(X, dtype=np.float64).reshape(X.shape[0], -1)
    return np.lexsort(flat.T[::-1])


def empirical_rademacher(sampler, X, spec, n_params: int, n_signs: int, seed,
                         masks=None) -> RademacherEstimate:
    """Monte-Carlo lower estimate of the empirical Rademacher complexity.

    ``sampler(g)`` returns parameters drawn with generator ``g``.  For each
    sign vector the supremum over the class is replaced by the maximum over
    ``n_params`` sampled members, so the estimate lower-bounds the true
    complexity of every output coordinate.  Rows are put in a canonical
    order first, so permuting the dataset leaves the estimate unchanged.
    """
    from .rng import child, generator
    from .train import predict

    X = np.asarray(X, dtype=np.float64)
    order = canonical_order(X)
    X = X[order]
    masks = None if masks is None else np.asarray(masks, dtype=np.float64)[order]
    n = X.shape[0]
    outs = np.stack([predict(sampler(generator(child(seed, 0, k))), X, spec, masks)
                     for k in range(n_params)])          # (n_params, n, d_y)
    g = generator(child(seed, 1))
    signs = g.choice(np.array([-1.0, 1.0]), size=(n_signs, n))
    corr = np.einsum("sn,pnj->spj", signs, outs) / n   # (n_signs, n_params, d_y)
    sup = corr.max(axis=1)                              # (n_signs, d_y)
    est = sup.mean(axis=0)
    se = sup.std(axis=0, ddof=1) / math.sqrt(n_signs) if n_signs > 1 else np.zeros_like(est)
    return RademacherEstimate(est, se, int(n_params), int(n_signs))
