"""Desk-scale experiments behind the command-line front end.

Every experiment is a pure function of its arguments and a root seed.
Trial ``s`` draws its randomness from child seeds of the root, so results
do not depend on how many workers run the trials or in which order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .attention import CME, AttentionHeadParams, MultiheadParams, attn_cme, attn_sm, mha_query, \
    singlehead_linear_limit
from .bounds import bound_report, data_radius, empirical_rademacher, layer_constants, radii, \
    rademacher_term
from .kernels import KernelSpec, sphere_integral_check, sphere_sample
from .latent import LatentModelSpec, cond_kde_mean, sample_episodes
from .rng import SeedLike, child, generator
from .train import (Dataset, SSLConfig, TrainConfig, condition_number, downstream_dataset,
                    pretrain_dataset, ssl_pipeline, train_supervised)
from .transformer import NormBudget, init_params, realized_norms, simple_preset


def run_trials(fn: Callable[[int], object], count: int, workers: int = 1) -> list:
    """``[fn(0), ..., fn(count - 1)]``, optionally on a thread pool (order preserved)."""
    if workers <= 1:
        return [fn(s) for s in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _quantiles(values) -> Dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75), "seed_count": int(v.size)}


def _check_lengths(Ls: Sequence[int]) -> List[int]:
    Ls = [int(L) for L in Ls]
    if not Ls:
        raise ValueError("the list of sequence lengths is empty")
    if any(L < 1 for L in Ls):
        raise ValueError("sequence lengths must be positive")
    if any(b <= a for a, b in zip(Ls, Ls[1:])):
        raise ValueError("sequence lengths must be strictly ascending")
    return Ls


# ---------------------------------------------------------------------------
# Convergence to the conditional mean
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TanhModel:
    """Keys uniform on the unit sphere, values ``tanh(M k) + noise``."""

    d_p: int = 4
    d_v: int = 8
    noise: float = 0.1

    def draw_map(self, seed: SeedLike) -> np.ndarray:
        return generator(seed).standard_normal((self.d_v, self.d_p))

    def sample(self, M: np.ndarray, L: int, seed: SeedLike):
        K = sphere_sample(self.d_p, L, child(seed, 0))
        V = np.tanh(K @ M.T) + self.noise * generator(child(seed, 1)).standard_normal((L, self.d_v))
        return K, V

    @staticmethod
    def conditional_mean(M: np.ndarray, q: np.ndarray) -> np.ndarray:
        return np.tanh(M @ q)


@dataclass(frozen=True)
class ConvergenceConfig:
    Ls: tuple = (64, 256, 1024, 4096)
    seeds: int = 20
    model: TanhModel = TanhModel()
    lam_coef: float = 0.05
    lam_power: float = 0.8
    bandwidth: float = 0.5           # RBF length scale for CME; NW start value for softmax
    sm_rate: Optional[float] = None  # softmax bandwidth decays as (L / L_0)^(-rate)
    workers: int = 1


def convergence_errors(mechanism: str, cfg: ConvergenceConfig, seed: SeedLike) -> Dict[int, List[float]]:
    """Error ``||attn(q) - E[V | K = q]||_2`` per length and trial.

    Trial ``s`` fixes the value map and the query, so the lengths are
    compared on common random numbers.  CME uses the RBF kernel with ridge
    ``lam_coef * L^lam_power``; softmax uses the RBF kernel (a
    Nadaraya-Watson smoother) with a bandwidth shrinking like
    ``L^(-1/(d_p + 4))``.
    """
    Ls = _check_lengths(cfg.Ls)
    model = cfg.model
    rate = cfg.sm_rate if cfg.sm_rate is not None else 1.0 / (model.d_p + 4)

    def one(s: int) -> List[float]:
        M = model.draw_map(child(seed, s, 0))
        q = sphere_sample(model.d_p, 1, child(seed, s, 1))[0]
        target = model.conditional_mean(M, q)
        errs = []
        for L in Ls:
            K, V = model.sample(M, L, child(seed, s, 2, L))
            if mechanism == "cme":
                spec = KernelSpec.rbf(model.d_p, bandwidth=cfg.bandwidth)
                out = attn_cme(q, K, V, spec, cfg.lam_coef * L ** cfg.lam_power)
            elif mechanism == "sm":
                bw = cfg.bandwidth * (L / Ls[0]) ** (-rate)
                out = attn_sm(q, K, V, KernelSpec.rbf(model.d_p, bandwidth=bw))
            else:
                raise ValueError(f"unknown mechanism {mechanism!r}")
            errs.append(float(np.linalg.norm(out - target)))
        return errs

    per_trial = run_trials(one, cfg.seeds, cfg.workers)
    return {L: [row[i] for row in per_trial] for i, L in enumerate(Ls)}


def convergence_table(mechanism: str, cfg: ConvergenceConfig, seed: SeedLike) -> List[Dict]:
    errors = convergence_errors(mechanism, cfg, seed)
    return [{"L": L, "mechanism": mechanism, **_quantiles(errors[L])} for L in sorted(errors)]


# ---------------------------------------------------------------------------
# Single-head limit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LimitConfig:
    Ls: tuple = (64, 256, 1024, 4096)
    seeds: int = 10
    d: int = 4
    identity: bool = False   # use W_k = W_v = I
    workers: int = 1


def _well_conditioned(g: np.random.Generator, d: int, lo: float = 1.0, hi: float = 2.0) -> np.ndarray:
    """``U diag(s) V^T`` with Haar-orthogonal ``U, V`` and singular values in ``[lo, hi]``."""
    U, _ = np.linalg.qr(g.standard_normal((d, d)))
    V, _ = np.linalg.qr(g.standard_normal((d, d)))
    return (U * g.uniform(lo, hi, d)) @ V.T


def singlehead_distances(cfg: LimitConfig, seed: SeedLike) -> Dict[str, Dict[int, List[float]]]:
    """Distance of Euclidean-kernel CME attention (ridge ``sqrt(L)``) to the linear oracle.

    Tokens are uniform on the sphere, queries use ``W_q = W_k``.  The
    single-head model (``d_p = d``) is compared with ``((W_k)^{-1} W_v)^T q``.
    The two-head contrast splits the same ``W_k`` column-wise into two
    heads of width ``d/2`` with value maps ``W_v / 2``; its stacked linear
    oracle is again ``W_v^T x_q``, but the attention converges to
    ``W_v^T (P_1 + P_2) x_q / 2`` with ``P_i`` the projection onto the span
    of head ``i``'s keys, so its distance levels off at a positive floor.
    """
    Ls = _check_lengths(cfg.Ls)
    d = cfg.d
    if d % 2:
        raise ValueError("the two-head contrast needs an even d")
    spec = KernelSpec.euclidean()

    def one(s: int):
        g = generator(child(seed, s, 0))
        if cfg.identity:
            W_k, W_v = np.eye(d), np.eye(d)
        else:
            W_k, W_v = _well_conditioned(g, d), g.standard_normal((d, d)) / math.sqrt(d)
        x_q = sphere_sample(d, 1, child(seed, s, 1))[0]
        q = W_k.T @ x_q
        oracle = singlehead_linear_limit(W_k, W_v, q)
        one_head = MultiheadParams([AttentionHeadParams(W_k, W_k, W_v)])
        half = d // 2
        two_heads = MultiheadParams([
            AttentionHeadParams(W_k[:, :half], W_k[:, :half], W_v / 2.0),
            AttentionHeadParams(W_k[:, half:], W_k[:, half:], W_v / 2.0),
        ])
        h1, h2 = [], []
        for L in Ls:
            X = sphere_sample(d, L, child(seed, s, 2, L))
            lam = math.sqrt(L)
            h1.append(float(np.linalg.norm(mha_query(x_q, X, one_head, spec, CME, lam) - oracle)))
            h2.append(float(np.linalg.norm(mha_query(x_q, X, two_heads, spec, CME, lam) - oracle)))
        return h1, h2

    res = run_trials(one, cfg.seeds, cfg.workers)
    return {
        "h1": {L: [r[0][i] for r in res] for i, L in enumerate(Ls)},
        "h2": {L: [r[1][i] for r in res] for i, L in enumerate(Ls)},
    }


def singlehead_table(cfg: LimitConfig, seed: SeedLike) -> List[Dict]:
    dist = singlehead_distances(cfg, seed)
    rows = []
    for h_label, h in (("h1", 1), ("h2", 2)):
        for L in sorted(dist[h_label]):
            rows.append({"L": L, "h": h, **_quantiles(dist[h_label][L])})
    return rows


# ---------------------------------------------------------------------------
# Softmax attention and the conditional KDE on the sphere
# ---------------------------------------------------------------------------


@dataclass
class KDECheck:
    C: np.ndarray            # per-query proportionality constant
    C_se: np.ndarray         # its Monte-Carlo standard error
    orth: np.ndarray         # norm of the KDE-mean component orthogonal to attn_sm
    orth_se: np.ndarray
    spread: float            # (max C - min C) / mean C
    pooled_rel_se: float     # root mean square of C_se / C
    passed: bool


def kde_check(n_queries: int = 5, n_mc: int = 200_000, temperature: float = 1.0, d: int = 3,
              L: int = 8, seed: SeedLike = 0, factor: float = 5.0) -> KDECheck:
    """Compare the conditional-KDE mean with softmax attention for several queries.

    Keys, values and queries lie on the unit sphere and both use the
    exponential kernel with the same temperature.  For each query the KDE
    mean is projected on the direction of ``attn_sm``; dividing by
    ``||attn_sm||`` gives the proportionality constant, which should be the
    same for every query.  The check passes when the relative spread of the
    constants is at most ``factor`` times the pooled relative standard
    error.  Each query uses independent Monte-Carlo samples.
    """
    K = sphere_sample(d, L, child(seed, 0))
    V = sphere_sample(d, L, child(seed, 1))
    Q = sphere_sample(d, n_queries, child(seed, 2))
    spec = KernelSpec.exponential(temperature)
    C, C_se, orth, orth_se = [], [], [], []
    for i, q in enumerate(Q):
        a = attn_sm(q, K, V, spec)
        est = cond_kde_mean(q, K, V, temperature, n_mc, child(seed, 3, i))
        na = float(np.linalg.norm(a))
        val, se = est.projection(a)
        C.append(val / na)
        C_se.append(se / na)
        u = a / na
        P = np.eye(d) - np.outer(u, u)
        r = P @ est.mean
        orth.append(float(np.linalg.norm(r)))
        orth_se.append(float(math.sqrt(max(np.trace(P @ est.cov @ P), 0.0))))
    C = np.array(C)
    C_se = np.array(C_se)
    spread = float((C.max() - C.min()) / C.mean())
    pooled = float(math.sqrt(np.mean((C_se / C) ** 2)))
    return KDECheck(C, C_se, np.array(orth), np.array(orth_se), spread, pooled, spread <= factor * pooled)


@dataclass
class SphereLemmaCheck:
    d: int
    n: int
    temperature: float
    coefficients: np.ndarray
    coefficient_se: np.ndarray
    residuals: np.ndarray
    residual_se: np.ndarray
    residual_ok: bool
    agreement_ok: bool
    large_temperature: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.residual_ok and self.agreement_ok


def sphere_lemma_check(d: int = 3, n: int = 200_000, temperature: float = 1.0, n_b: int = 2,
                       seed: SeedLike = 0) -> SphereLemmaCheck:
    """Check that the sphere average of ``a exp(a^T b / T)`` is parallel to ``b``
    with a coefficient that does not depend on ``b``.

    Residuals must be within 5 standard errors of zero, and every pair of
    directions must agree within 3 combined standard errors.  A very large
    temperature (where the coefficient tends to zero) is reported too.
    """
    bs = sphere_sample(d, n_b, child(seed, 0))
    res = [sphere_integral_check(temperature, b, n, child(seed, 1, i)) for i, b in enumerate(bs)]
    coef = np.array([r.coefficient for r in res])
    cse = np.array([r.coefficient_se for r in res])
    resid = np.array([r.residual for r in res])
    rse = np.array([r.residual_se for r in res])
    residual_ok = bool(np.all(resid <= 5.0 * rse))
    agree = True
    for i in range(n_b):
        for j in range(i + 1, n_b):
            agree &= abs(coef[i] - coef[j]) <= 3.0 * math.sqrt(cse[i] ** 2 + cse[j] ** 2)
    big = sphere_integral_check(1e6, bs[0], n, child(seed, 2))
    return SphereLemmaCheck(d, n, temperature, coef, cse, resid, rse, residual_ok, bool(agree),
                            {"coefficient": big.coefficient, "coefficient_se": big.coefficient_se})


# ---------------------------------------------------------------------------
# Training experiments
# ---------------------------------------------------------------------------


def teacher_dataset(n: int, L: int, d: int, d_y: int, seed: SeedLike, B: Optional[np.ndarray] = None):
    """Sequences with targets ``0.5 tanh(B^T mean_rows(X))`` from a fixed teacher ``B``."""
    g = generator(seed)
    if B is None:
        B = generator(child(seed, 99)).standard_normal((d, d_y))
    X = g.standard_normal((n, L, d))
    Y = 0.5 * np.tanh(X.mean(axis=1) @ B)
    return Dataset(X, Y), B


@dataclass(frozen=True)
class ToyConfig:
    n: int = 64
    n_test: int = 256
    L: int = 8
    d_p: int = 2
    h: int = 2
    d_sigma: int = 8
    d_y: int = 2
    T: int = 1
    steps: int = 2000
    lr: float = 0.5
    scale: float = 0.5


def train_toy(cfg: ToyConfig, seed: SeedLike) -> Dict:
    """Fit a transformer to teacher data and report losses and bound terms."""
    d = cfg.d_p * cfg.h
    train, B = teacher_dataset(cfg.n, cfg.L, d, cfg.d_y, child(seed, 0))
    test, _ = teacher_dataset(cfg.n_test, cfg.L, d, cfg.d_y, child(seed, 1), B)
    params = init_params(d, cfg.d_p, cfg.h, cfg.d_sigma, cfg.d_y, cfg.T, child(seed, 2), cfg.scale)
    spec = KernelSpec.rbf(cfg.d_p)
    res = train_supervised(params, train, TrainConfig(steps=cfg.steps, lr=cfg.lr, seed=0), spec, test)
    norms = realized_norms(res.params)
    rep = bound_report(norms, data_radius(train.X), d, cfg.d_sigma, cfg.d_p, cfg.d_y, cfg.n)
    out = dict(res.report)
    out["gen_bound"] = rep.globals["gen_bound"]
    out["rademacher"] = rep.globals["rademacher"]
    return {"result": res, "report": out, "bound": rep, "data": train, "spec": spec}


@dataclass(frozen=True)
class TransferConfig:
    latent: LatentModelSpec = LatentModelSpec(d=4, d_c=3, d_r=1, L=16, noise=0.1)
    n_pretrain: int = 256
    n_downstream: int = 64
    n_test: int = 256
    d_p: int = 4
    target_scale: float = 0.25
    pretrain_steps: int = 600
    downstream_steps: int = 600
    lr: float = 0.5
    kernel: str = "exponential"         # "exponential" (temperature 1) or "rbf"
    target_map: Optional[tuple] = None  # rows of G; identity when None


def ssl_transfer(cfg: TransferConfig, seed: SeedLike) -> Dict:
    """Pretrain a masked-query model, then compare frozen and random attention downstream."""
    lat = cfg.latent
    d = lat.d_c + lat.d_r
    G = None if cfg.target_map is None else np.array(cfg.target_map, dtype=np.float64)
    pre = pretrain_dataset(sample_episodes(lat, cfg.n_pretrain, child(seed, 0)), cfg.target_scale)
    ds = downstream_dataset(sample_episodes(lat, cfg.n_downstream, child(seed, 1)), G, cfg.target_scale)
    test = downstream_dataset(sample_episodes(lat, cfg.n_test, child(seed, 2)), G, cfg.target_scale)
    params, trainable = simple_preset(d, cfg.d_p, d // cfg.d_p, lat.d_r, child(seed, 3))
    spec = KernelSpec.exponential(1.0) if cfg.kernel == "exponential" else KernelSpec.rbf(cfg.d_p)
    scfg = SSLConfig(TrainConfig(steps=cfg.pretrain_steps, lr=cfg.lr, pipeline="ssl"),
                     TrainConfig(steps=cfg.downstream_steps, lr=cfg.lr, pipeline="ssl"))
    res = ssl_pipeline(params, pre, ds, test, scfg, spec, pretrain_trainable=trainable)
    report = dict(res.report)
    # Both readouts act on the same pooled features, so they play the roles
    # of the downstream and pretraining weightings in the condition number.
    report["mu"] = condition_number(res.downstream.agg_w, res.theta_pt.agg_w)
    return {"result": res, "report": report}


def rademacher_experiment(n: int = 32, L: int = 6, d_p: int = 2, h: int = 2, d_sigma: int = 4,
                          d_y: int = 1, T: int = 1, n_params: int = 64, n_signs: int = 200,
                          scale: float = 0.5, seed: SeedLike = 0) -> Dict:
    """Sampled-class Rademacher estimate next to the covering-based bound.

    The class is the set of parameters whose realized norms stay within the
    elementwise maximum of the sampled members' norms, so every sampled
    member lies in the class the bound describes.
    """
    d = d_p * h
    g = generator(child(seed, 0))
    X = g.standard_normal((n, L, d))
    spec = KernelSpec.rbf(d_p)

    drawn = []

    def sampler(gen):
        p = init_params(d, d_p, h, d_sigma, d_y, T, int(gen.integers(2**63)), scale)
        drawn.append(p)
        return p

    est = empirical_rademacher(sampler, X, spec, n_params, n_signs, child(seed, 1))
    budget = realized_norms(drawn[0])
    for p in drawn[1:]:
        budget = _elementwise_max(budget, realized_norms(p))
    consts = layer_constants(budget)
    rad = radii(consts, data_radius(X))
    D = max(d, d_sigma, d_p, d_y)
    bound = rademacher_term(D, h, T, rad.R[T], rad.R_trans, n)
    return {"estimate": est, "bound": bound, "passed": bool(np.all(est.estimate <= bound))}


def _elementwise_max(a: NormBudget, b: NormBudget) -> NormBudget:
    from .transformer import LayerBudget

    layers = []
    for la, lb in zip(a.layers, b.layers):
        vals = {}
        for name in ("alpha_x", "alpha_sigma", "R_x", "R_sigma"):
            vals[name] = max(getattr(la, name), getattr(lb, name))
        for name in ("omega_q", "omega_k", "omega_v", "R_q", "R_k", "R_v"):
            vals[name] = tuple(max(x, y) for x, y in zip(getattr(la, name), getattr(lb, name)))
        layers.append(LayerBudget(**vals))
    return NormBudget(layers, a.pair)
