"""Randomized audits of the Lipschitz and magnitude lemmas.

Each trial draws a random instance, evaluates the change predicted by the
lemma and the change actually observed, and records their ratio.  A ratio
above ``1 + 1e-9`` is a failed certificate; the worst instance of every
lemma is kept so that it can be written out for inspection.

The lemmas are evaluated with the RBF kernel of bandwidth ``(2 d_p)^(1/s)``
and every norm is taken on transposes, matching the parameter conventions
of :mod:`attnlab.transformer`.  When a lemma's constant depends on the
magnitude of its inputs, the audit uses one radius that bounds both the
original and the perturbed input (this is how the constants enter the
covering argument, where both live in the same class).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .attention import AttentionHeadParams, MultiheadParams, mha, sm_weights
from .bounds import layer_constants, radii, safe_ratio
from .kernels import KernelSpec
from .linalg import INF, ConjugatePair, norm_rs, op_norm, vec_norm
from .rng import SeedLike, child, generator
from .transformer import forward, init_params, realized_norms

TOLERANCE = 1e-9
LEMMAS = ("lip-sm", "lip-mha-param", "lip-mha-input", "mag")
OP_TOL = 1e-9  # residual tolerance; the Rayleigh quotient error is quadratic in it


@dataclass
class LemmaResult:
    name: str
    trials: int
    max_ratio: float
    worst: Dict = field(default_factory=dict)
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_ratio <= 1.0 + TOLERANCE


@dataclass
class AuditReport:
    results: List[LemmaResult]
    pair: ConjugatePair

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def dump(self, path) -> None:
        """Write the worst instance of every lemma (floats in hex, bit-exact)."""
        payload = {r.name: {"max_ratio": float.hex(r.max_ratio), "instance": _hexify(r.worst)}
                   for r in self.results}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _hexify(obj):
    if isinstance(obj, dict):
        return {k: _hexify(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"shape": list(obj.shape), "data": [float(v).hex() for v in obj.ravel()]}
    if isinstance(obj, float):
        return float(obj).hex()
    return obj


def _rinf(M: np.ndarray, pair: ConjugatePair) -> float:
    """``||M^T||_{r, inf}``: the largest row r-norm of ``M``."""
    return norm_rs(np.atleast_2d(M).T, (pair.r, INF))


def _op_t(W: np.ndarray, pair: ConjugatePair) -> float:
    return op_norm(np.asarray(W).T, pair.r, tol=OP_TOL)


def _rs_t(W: np.ndarray, pair: ConjugatePair) -> float:
    return norm_rs(np.asarray(W).T, (pair.r, pair.s))


def _scale(g: np.random.Generator) -> float:
    """Log-uniform perturbation size in [1e-4, 1]."""
    return float(10.0 ** g.uniform(-4.0, 0.0))


# ---------------------------------------------------------------------------
# Individual lemmas
# ---------------------------------------------------------------------------


def audit_softmax(trials: int, seed: SeedLike, pair: ConjugatePair, d_p: int = 4) -> LemmaResult:
    """Softmax weights move by at most ``(||q|| + ||K^T||) * perturbation`` in l1."""
    spec = KernelSpec.rbf(d_p, s=pair.s)
    worst = {}
    best = 0.0
    zero_key_lhs = 0.0
    for k in range(trials):
        g = generator(child(seed, k))
        L = int(g.integers(2, 17))
        q = g.standard_normal(d_p) * g.uniform(0.1, 2.0)
        K = g.standard_normal((L, d_p)) * g.uniform(0.1, 2.0)
        p = sm_weights(spec, K, q[None, :])[0]
        if k % 2 == 0:
            Kh = K + _scale(g) * g.standard_normal((L, d_p))
            ph = sm_weights(spec, Kh, q[None, :])[0]
            radius_k = max(_rinf(K, pair), _rinf(Kh, pair))
            bound = (vec_norm(q, pair.r) + radius_k) * _rinf(K - Kh, pair)
            inst = {"variant": "keys", "q": q, "K": K, "K_hat": Kh}
        else:
            qh = q + _scale(g) * g.standard_normal(d_p)
            ph = sm_weights(spec, K, qh[None, :])[0]
            radius_q = max(vec_norm(q, pair.r), vec_norm(qh, pair.r))
            bound = (radius_q + _rinf(K, pair)) * vec_norm(q - qh, pair.r)
            inst = {"variant": "query", "q": q, "q_hat": qh, "K": K}
        lhs = float(np.sum(np.abs(p - ph)))
        ratio = safe_ratio(lhs, bound)
        if ratio > best or not worst:
            best, worst = ratio, inst
        if k == 0:
            zero_key_lhs = float(np.sum(np.abs(p - sm_weights(spec, K.copy(), q[None, :])[0])))
    return LemmaResult("lip-sm", trials, best, worst, {"identical_keys_lhs": zero_key_lhs})


def _random_heads(g: np.random.Generator, d: int, d_p: int, h: int, scale: float) -> MultiheadParams:
    return MultiheadParams([
        AttentionHeadParams(scale * g.standard_normal((d, d_p)) / math.sqrt(d),
                            scale * g.standard_normal((d, d_p)) / math.sqrt(d),
                            scale * g.standard_normal((d, d)) / math.sqrt(d))
        for _ in range(h)
    ])


def _perturb_heads(g: np.random.Generator, params: MultiheadParams, size: float) -> MultiheadParams:
    return MultiheadParams([
        AttentionHeadParams(hp.W_q + size * g.standard_normal(hp.W_q.shape),
                            hp.W_k + size * g.standard_normal(hp.W_k.shape),
                            hp.W_v + size * g.standard_normal(hp.W_v.shape))
        for hp in params.heads
    ])


def mha_param_bound(X: np.ndarray, W: MultiheadParams, W_hat: MultiheadParams, pair: ConjugatePair,
                    with_value_norm: bool = True) -> float:
    """Predicted change of the attention output under a parameter change.

    ``sum_i [R eps_v + (w_q + w_k) w_v R^3 (eps_q + eps_k)]`` where ``R``
    bounds the input and each ``w`` bounds both the original and the
    perturbed weight.  ``with_value_norm=False`` drops the ``w_v`` factor.
    """
    R = _rinf(X, pair)
    total = 0.0
    for a, b in zip(W.heads, W_hat.heads):
        wq = max(_op_t(a.W_q, pair), _op_t(b.W_q, pair))
        wk = max(_op_t(a.W_k, pair), _op_t(b.W_k, pair))
        wv = max(_op_t(a.W_v, pair), _op_t(b.W_v, pair)) if with_value_norm else 1.0
        eq = _rs_t(a.W_q - b.W_q, pair)
        ek = _rs_t(a.W_k - b.W_k, pair)
        ev = _rs_t(a.W_v - b.W_v, pair)
        total += R * ev + (wq + wk) * wv * R ** 3 * (eq + ek)
    return total


def audit_mha_param(trials: int, seed: SeedLike, pair: ConjugatePair, d_p: int = 2, h: int = 2
                    ) -> LemmaResult:
    d = d_p * h
    spec = KernelSpec.rbf(d_p, s=pair.s)
    best, worst = 0.0, {}
    printed_worst = 0.0
    for k in range(trials):
        g = generator(child(seed, k))
        L = int(g.integers(2, 13))
        X = g.standard_normal((L, d)) * g.uniform(0.2, 1.5)
        W = _random_heads(g, d, d_p, h, g.uniform(0.3, 2.0))
        Wh = W if k == 0 else _perturb_heads(g, W, _scale(g))
        lhs = _rinf(mha(X, W, spec) - mha(X, Wh, spec), pair)
        ratio = safe_ratio(lhs, mha_param_bound(X, W, Wh, pair))
        printed_worst = max(printed_worst, safe_ratio(lhs, mha_param_bound(X, W, Wh, pair, False)))
        if ratio > best or not worst:
            best = ratio
            worst = {"X": X, **_heads_dict("W", W), **_heads_dict("W_hat", Wh)}
    return LemmaResult("lip-mha-param", trials, best, worst, {"max_ratio_without_value_norm": printed_worst})


def _heads_dict(prefix: str, params: MultiheadParams) -> Dict[str, np.ndarray]:
    out = {}
    for i, hp in enumerate(params.heads):
        out[f"{prefix}{i}.W_q"] = hp.W_q
        out[f"{prefix}{i}.W_k"] = hp.W_k
        out[f"{prefix}{i}.W_v"] = hp.W_v
    return out


def mha_input_constant(W: MultiheadParams, R: float, pair: ConjugatePair) -> float:
    """``sum_i w_v + R^2 sum_i (w_q + w_k)^2 w_v``."""
    first = 0.0
    second = 0.0
    for hp in W.heads:
        wq, wk, wv = _op_t(hp.W_q, pair), _op_t(hp.W_k, pair), _op_t(hp.W_v, pair)
        first += wv
        second += (wq + wk) ** 2 * wv
    return first + R * R * second


def audit_mha_input(trials: int, seed: SeedLike, pair: ConjugatePair, d_p: int = 2, h: int = 2
                    ) -> LemmaResult:
    d = d_p * h
    spec = KernelSpec.rbf(d_p, s=pair.s)
    best, worst = 0.0, {}
    for k in range(trials):
        g = generator(child(seed, k))
        L = int(g.integers(2, 13))
        X = g.standard_normal((L, d)) * g.uniform(0.2, 1.5)
        Xh = X if k == 0 else X + _scale(g) * g.standard_normal((L, d))
        W = _random_heads(g, d, d_p, h, g.uniform(0.3, 2.0))
        R = max(_rinf(X, pair), _rinf(Xh, pair))
        lhs = _rinf(mha(X, W, spec) - mha(Xh, W, spec), pair)
        ratio = safe_ratio(lhs, mha_input_constant(W, R, pair) * _rinf(X - Xh, pair))
        if ratio > best or not worst:
            best = ratio
            worst = {"X": X, "X_hat": Xh, **_heads_dict("W", W)}
    return LemmaResult("lip-mha-input", trials, best, worst)


def audit_magnitude(trials: int, seed: SeedLike, pair: ConjugatePair, d_p: int = 2, h: int = 2,
                    d_sigma: int = 6, T: int = 2, n_seq: int = 3) -> LemmaResult:
    """Forward traces stay within ``R^(t)`` (after attention) and ``alpha~ R^(t)`` (after FFN)."""
    d = d_p * h
    spec = KernelSpec.rbf(d_p, s=pair.s)
    best, worst = 0.0, {}
    for k in range(trials):
        g = generator(child(seed, k))
        params = init_params(d, d_p, h, d_sigma, 1, T, child(seed, k, 1), scale=g.uniform(0.2, 1.5),
                             pair=pair)
        L = int(g.integers(1, 10))
        Xs = [g.standard_normal((L, d)) * g.uniform(0.2, 1.5) for _ in range(n_seq)]
        consts = layer_constants(realized_norms(params, pair, tol=OP_TOL))
        R0 = max(_rinf(X, pair) for X in Xs)
        R = radii(consts, R0).R
        for X in Xs:
            _, trace = forward(X, params, spec)
            for t in range(T + 1):
                r = safe_ratio(_rinf(trace.X_star[t], pair), R[t])
                if r > best or not worst:
                    best, worst = r, {"where": f"X_star[{t}]", "X": X, **params.to_dict()}
            for t in range(T):
                r = safe_ratio(_rinf(trace.X[t], pair), consts[t].alpha_tilde * R[t])
                if r > best:
                    best, worst = r, {"where": f"X[{t}]", "X": X, **params.to_dict()}
    return LemmaResult("mag", trials, best, worst)


def lipschitz_audit(trials: int = 1000, seed: SeedLike = 0, pair: Optional[ConjugatePair] = None,
                    lemmas=LEMMAS) -> AuditReport:
    """Run the selected lemma audits with ``trials`` random instances each."""
    pair = pair or ConjugatePair()
    runners = {
        "lip-sm": audit_softmax,
        "lip-mha-param": audit_mha_param,
        "lip-mha-input": audit_mha_input,
        "mag": audit_magnitude,
    }
    results = []
    for i, name in enumerate(LEMMAS):
        if name in lemmas:
            results.append(runners[name](trials, child(seed, i), pair))
    return AuditReport(results, pair)
