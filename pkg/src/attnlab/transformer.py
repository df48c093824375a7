"""Transformer forward pass, parameter containers, norms and serialization.

Layer ``t`` maps ``X_star^(t)`` to ``X^(t) = ffn(X_star^(t))`` and then to
``X_star^(t+1) = mha(X^(t)) + X^(t)``.  The aggregation either mean-pools
the final sequence or, when an aggregation head is present, lets a masked
query token attend over it; a linear map and ``0.5 * tanh`` follow.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import SM, AttentionHeadParams, MultiheadParams, mha, mha_query
from .kernels import KernelSpec
from .linalg import ConjugatePair, column_norms, norm_rs, op_norm, vec_norm
from .rng import SeedLike, generator


class BudgetWarning(UserWarning):
    """Realized parameter norms exceed the declared budget."""


@dataclass
class LayerParams:
    A_x: np.ndarray       # d x d_sigma
    A_sigma: np.ndarray   # d_sigma x d
    mha: MultiheadParams

    def __post_init__(self):
        self.A_x = np.asarray(self.A_x, dtype=np.float64)
        self.A_sigma = np.asarray(self.A_sigma, dtype=np.float64)
        d, ds = self.A_x.shape
        if self.A_sigma.shape != (ds, d):
            raise ValueError(f"A_sigma must be {ds}x{d}, got {self.A_sigma.shape}")
        if self.mha.d != d:
            raise ValueError("attention width must match the FFN width")


@dataclass
class TransformerParams:
    """All weights of a T-layer model.

    ``agg_w`` is ``d x d_y``; output ``j`` is ``0.5 tanh(<agg_w[:, j], pooled>)``.
    ``agg_head`` switches pooling from the row mean to masked-query attention.
    """

    layers: List[LayerParams]
    agg_w: np.ndarray
    agg_head: Optional[MultiheadParams] = None

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("a transformer needs T >= 1 layers")
        self.agg_w = np.asarray(self.agg_w, dtype=np.float64)
        if self.agg_w.ndim != 2 or self.agg_w.shape[0] != self.d:
            raise ValueError("agg_w must be d x d_y")

    @property
    def T(self) -> int:
        return len(self.layers)

    @property
    def d(self) -> int:
        return self.layers[0].A_x.shape[0]

    @property
    def d_sigma(self) -> int:
        return self.layers[0].A_x.shape[1]

    @property
    def d_p(self) -> int:
        return self.layers[0].mha.d_p

    @property
    def h(self) -> int:
        return self.layers[0].mha.h

    @property
    def d_y(self) -> int:
        return self.agg_w.shape[1]

    # -- flat views ---------------------------------------------------------

    def to_dict(self) -> Dict[str, np.ndarray]:
        """Ordered mapping from parameter name to array (views, not copies)."""
        out: Dict[str, np.ndarray] = {}
        for t, layer in enumerate(self.layers):
            out[f"layer{t}.A_x"] = layer.A_x
            out[f"layer{t}.A_sigma"] = layer.A_sigma
            for i, hp in enumerate(layer.mha.heads):
                out[f"layer{t}.head{i}.W_q"] = hp.W_q
                out[f"layer{t}.head{i}.W_k"] = hp.W_k
                out[f"layer{t}.head{i}.W_v"] = hp.W_v
        if self.agg_head is not None:
            for i, hp in enumerate(self.agg_head.heads):
                out[f"agg_head.head{i}.W_q"] = hp.W_q
                out[f"agg_head.head{i}.W_k"] = hp.W_k
                out[f"agg_head.head{i}.W_v"] = hp.W_v
        out["agg_w"] = self.agg_w
        return out

    @classmethod
    def from_dict(cls, tensors: Dict[str, np.ndarray]) -> "TransformerParams":
        T = 1 + max(int(k[5:].split(".")[0]) for k in tensors if k.startswith("layer"))
        layers = []
        for t in range(T):
            heads = _heads_from(tensors, f"layer{t}.")
            layers.append(LayerParams(tensors[f"layer{t}.A_x"], tensors[f"layer{t}.A_sigma"],
                                      MultiheadParams(heads)))
        agg_head = None
        if any(k.startswith("agg_head.") for k in tensors):
            agg_head = MultiheadParams(_heads_from(tensors, "agg_head."))
        return cls(layers, tensors["agg_w"], agg_head)

    def copy(self) -> "TransformerParams":
        return TransformerParams.from_dict({k: v.copy() for k, v in self.to_dict().items()})


def _heads_from(tensors: Dict[str, np.ndarray], prefix: str) -> List[AttentionHeadParams]:
    heads = []
    i = 0
    while f"{prefix}head{i}.W_q" in tensors:
        heads.append(AttentionHeadParams(tensors[f"{prefix}head{i}.W_q"],
                                         tensors[f"{prefix}head{i}.W_k"],
                                         tensors[f"{prefix}head{i}.W_v"]))
        i += 1
    return heads


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------


def random_multihead(d: int, d_p: int, h: int, scale: float, g: np.random.Generator) -> MultiheadParams:
    heads = [
        AttentionHeadParams(
            scale * g.standard_normal((d, d_p)) / np.sqrt(d),
            scale * g.standard_normal((d, d_p)) / np.sqrt(d),
            scale * g.standard_normal((d, d)) / np.sqrt(d),
        )
        for _ in range(h)
    ]
    return MultiheadParams(heads)


def init_params(d: int, d_p: int, h: int, d_sigma: int, d_y: int, T: int, seed: SeedLike,
                scale: float = 0.5, agg_head: bool = False,
                pair: Optional[ConjugatePair] = None) -> TransformerParams:
    """Random parameters with entries of order ``scale / sqrt(fan_in)``.

    Readout columns are rescaled to dual-norm at most one so that each
    output is 1-Lipschitz in the pooled features.
    """
    pair = pair or ConjugatePair()
    if d != d_p * h:
        raise ValueError(f"d = {d} must equal d_p * h = {d_p * h}")
    g = generator(seed)
    layers = []
    for _ in range(T):
        A_x = scale * g.standard_normal((d, d_sigma)) / np.sqrt(d)
        A_sigma = scale * g.standard_normal((d_sigma, d)) / np.sqrt(d_sigma)
        layers.append(LayerParams(A_x, A_sigma, random_multihead(d, d_p, h, scale, g)))
    W = g.standard_normal((d, d_y))
    W /= np.maximum(column_norms(W, pair.s), 1.0)
    head = random_multihead(d, d_p, h, scale, g) if agg_head else None
    return TransformerParams(layers, W, head)


def simple_preset(d: int, d_p: int, h: int, d_y: int, seed: SeedLike, scale: float = 0.5
                  ) -> Tuple[TransformerParams, List[str]]:
    """One-layer preset whose body is the identity and whose output is
    ``agg(attn(q(mask), k(X), v(X)))``.

    The single layer has ``A_x = 0`` (FFN reduces to the skip) and ``W_v = 0``
    (the attention residual vanishes), so only the masked-query head and the
    readout are active.  Returns the parameters and the names that should be
    trained for this preset.
    """
    p = init_params(d, d_p, h, d, d_y, 1, seed, scale, agg_head=True)
    p.layers[0].A_x[...] = 0.0
    for hp in p.layers[0].mha.heads:
        hp.W_v[...] = 0.0
    trainable = [k for k in p.to_dict() if k.startswith("agg_")]
    return p, trainable


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def ffn(X_star, A_x, A_sigma) -> np.ndarray:
    """``ReLU(X_star A_x) A_sigma + X_star``."""
    X_star = np.asarray(X_star, dtype=np.float64)
    A_x = np.asarray(A_x, dtype=np.float64)
    A_sigma = np.asarray(A_sigma, dtype=np.float64)
    if X_star.shape[1] != A_x.shape[0] or A_x.shape[1] != A_sigma.shape[0] or A_sigma.shape[1] != X_star.shape[1]:
        raise ValueError("ffn shapes are inconsistent")
    return relu(X_star @ A_x) @ A_sigma + X_star


@dataclass
class ForwardTrace:
    X_star: List[np.ndarray]   # T + 1 entries
    X: List[np.ndarray]        # T entries
    pooled: np.ndarray
    warnings: List[str] = field(default_factory=list)


def aggregate(X_final: np.ndarray, params: TransformerParams, spec: KernelSpec,
              mask_token: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    if params.agg_head is None:
        pooled = X_final.mean(axis=0)
    else:
        if mask_token is None:
            raise ValueError("a masked-query aggregation needs mask_token")
        pooled = mha_query(mask_token, X_final, params.agg_head, spec)
    return 0.5 * np.tanh(params.agg_w.T @ pooled), pooled


def forward(X, params: TransformerParams, spec: KernelSpec, mask_token=None,
            budget: Optional["NormBudget"] = None) -> Tuple[np.ndarray, ForwardTrace]:
    """Run the model on one sequence ``X`` (L x d).

    Returns ``y_hat`` and a trace with every intermediate ``X_star^(t)`` and
    ``X^(t)``.  If ``budget`` is given and exceeded, a :class:`BudgetWarning`
    is issued and recorded in the trace.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a nonempty L x d array")
    if X.shape[1] != params.d:
        raise ValueError(f"X has width {X.shape[1]}, model expects {params.d}")
    notes: List[str] = []
    if budget is not None:
        notes = budget_violations(realized_norms(params, budget.pair), budget)
        for msg in notes:
            warnings.warn(msg, BudgetWarning, stacklevel=2)
    xs = [X]
    xt = []
    cur = X
    for layer in params.layers:
        hidden = ffn(cur, layer.A_x, layer.A_sigma)
        xt.append(hidden)
        cur = mha(hidden, layer.mha, spec, SM, strict_dims=False) + hidden
        xs.append(cur)
    y, pooled = aggregate(cur, params, spec, mask_token)
    return y, ForwardTrace(X_star=xs, X=xt, pooled=pooled, warnings=notes)


# ---------------------------------------------------------------------------
# Norm bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class LayerBudget:
    """Norm bounds for one layer; per-head entries are tuples of length h."""

    alpha_x: float
    alpha_sigma: float
    R_x: float
    R_sigma: float
    omega_q: Tuple[float, ...]
    omega_k: Tuple[float, ...]
    omega_v: Tuple[float, ...]
    R_q: Tuple[float, ...]
    R_k: Tuple[float, ...]
    R_v: Tuple[float, ...]

    @property
    def h(self) -> int:
        return len(self.omega_v)

    def items(self):
        for name in ("alpha_x", "alpha_sigma", "R_x", "R_sigma"):
            yield name, None, getattr(self, name)
        for name in ("omega_q", "omega_k", "omega_v", "R_q", "R_k", "R_v"):
            for i, v in enumerate(getattr(self, name)):
                yield name, i, v


@dataclass
class NormBudget:
    layers: List[LayerBudget]
    pair: ConjugatePair = field(default_factory=ConjugatePair)

    @property
    def T(self) -> int:
        return len(self.layers)

    @classmethod
    def uniform(cls, T: int, h: int, value: float = 1.0, pair: Optional[ConjugatePair] = None,
                **overrides) -> "NormBudget":
        """Budget with every bound equal to ``value`` (overrides by field name)."""
        layers = []
        for _ in range(T):
            vals = {n: overrides.get(n, value) for n in ("alpha_x", "alpha_sigma", "R_x", "R_sigma")}
            per = {n: tuple([overrides.get(n, value)] * h) for n in
                   ("omega_q", "omega_k", "omega_v", "R_q", "R_k", "R_v")}
            layers.append(LayerBudget(**vals, **per))
        return cls(layers, pair or ConjugatePair())


def realized_norms(params: TransformerParams, pair: Optional[ConjugatePair] = None,
                   tol: float = 1e-10) -> NormBudget:
    """Exact operator and (r, s) norms of every weight, on transposes."""
    pair = pair or ConjugatePair()
    rs = (pair.r, pair.s)

    def op(W):
        return op_norm(np.asarray(W).T, pair.r, tol=tol)

    def nrs(W):
        return norm_rs(np.asarray(W).T, rs)

    layers = []
    for layer in params.layers:
        heads = layer.mha.heads
        layers.append(LayerBudget(
            alpha_x=op(layer.A_x), alpha_sigma=op(layer.A_sigma),
            R_x=nrs(layer.A_x), R_sigma=nrs(layer.A_sigma),
            omega_q=tuple(op(hp.W_q) for hp in heads),
            omega_k=tuple(op(hp.W_k) for hp in heads),
            omega_v=tuple(op(hp.W_v) for hp in heads),
            R_q=tuple(nrs(hp.W_q) for hp in heads),
            R_k=tuple(nrs(hp.W_k) for hp in heads),
            R_v=tuple(nrs(hp.W_v) for hp in heads),
        ))
    return NormBudget(layers, pair)


def budget_violations(realized: NormBudget, budget: NormBudget) -> List[str]:
    """Human-readable list of realized norms above their budget."""
    out = []
    for t, (got, cap) in enumerate(zip(realized.layers, budget.layers)):
        for (name, i, value), (_, _, bound) in zip(got.items(), cap.items()):
            if value > bound * (1.0 + 1e-12):
                where = f"layer {t} {name}" + ("" if i is None else f"[{i}]")
                out.append(f"{where}: realized {value:.6g} exceeds budget {bound:.6g}")
    return out


def agg_rows_ok(params: TransformerParams, pair: Optional[ConjugatePair] = None) -> bool:
    """Whether every readout vector has dual-norm at most one."""
    pair = pair or ConjugatePair()
    return all(vec_norm(params.agg_w[:, j], pair.s) <= 1.0 + 1e-12 for j in range(params.d_y))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_HEADER = "# attnlab-params v1"


def dumps_params(params: TransformerParams) -> str:
    """Flat text: one block per tensor, a shape header, then hex floats by row."""
    buf = io.StringIO()
    buf.write(_HEADER + "\n")
    for name, arr in params.to_dict().items():
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        buf.write(f"tensor {name} {arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            buf.write(" ".join(float(v).hex() for v in row) + "\n")
    return buf.getvalue()


def loads_params(text: str) -> TransformerParams:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != _HEADER:
        raise ValueError("not an attnlab parameter file")
    tensors: Dict[str, np.ndarray] = {}
    pos = 1
    while pos < len(lines):
        parts = lines[pos].split()
        if len(parts) != 4 or parts[0] != "tensor":
            raise ValueError(f"bad block header on line {pos + 1}: {lines[pos]!r}")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        data = [[float.fromhex(tok) for tok in lines[pos + 1 + i].split()] for i in range(rows)]
        arr = np.array(data, dtype=np.float64).reshape(rows, cols)
        tensors[name] = arr
        pos += 1 + rows
    return TransformerParams.from_dict(tensors)


def save_params(params: TransformerParams, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_params(params))


def load_params(path) -> TransformerParams:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_params(fh.read())
