"""Softmax and conditional-mean-embedding attention, single and multihead."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .kernels import EXPONENTIAL, RBF, KernelSpec, cross, cross_matrix, gram, log_scores
from .linalg import spd_solve

SM = "sm"
CME = "cme"

SINGULAR_CONDITION = 1e12


def _vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    return arr


def _seq(M, name: str) -> np.ndarray:
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one token")
    return arr


def norm_softmax(scores) -> np.ndarray:
    """Normalize positive scores to sum to one."""
    s = _vector(scores, "scores")
    if s.size == 0:
        raise ValueError("scores must be nonempty")
    if np.any(~(s > 0)):
        raise ValueError("softmax normalization needs strictly positive scores")
    return s / np.sum(s)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with a max shift."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= np.sum(z, axis=-1, keepdims=True)
    return z


def sm_weights(spec: KernelSpec, K, Q) -> np.ndarray:
    """Softmax-normalized kernel weights, one row per query, shape (L_q, L_k)."""
    if spec.family in (EXPONENTIAL, RBF):
        return softmax_rows(log_scores(spec, K, Q))
    S = cross_matrix(spec, Q, K)
    if np.any(~(S > 0)):
        raise ValueError("softmax normalization needs strictly positive scores")
    return S / np.sum(S, axis=1, keepdims=True)


def _check_kv(K: np.ndarray, V: np.ndarray) -> None:
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")


def attn_sm(q, K, V, spec: KernelSpec) -> np.ndarray:
    """Softmax attention ``V^T norm(k(K, q))`` for one query."""
    q = _vector(q, "q")
    K, V = _seq(K, "K"), _seq(V, "V")
    _check_kv(K, V)
    if q.size != K.shape[1]:
        raise ValueError(f"query has dimension {q.size}, keys have {K.shape[1]}")
    w = sm_weights(spec, K, q[None, :])[0]
    return V.T @ w


def attn_cme(q, K, V, spec: KernelSpec, lam: float) -> np.ndarray:
    """CME attention ``V^T (k(K, K) + lam I)^{-1} k(K, q)`` for one query."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    q = _vector(q, "q")
    K, V = _seq(K, "K"), _seq(V, "V")
    _check_kv(K, V)
    kq = cross(spec, K, q)
    alpha = spd_solve(gram(spec, K), kq, ridge=lam)
    return V.T @ alpha


def attn_seq(Q, K, V, spec: KernelSpec, mode: str = SM, lam: Optional[float] = None) -> np.ndarray:
    """Sequence-to-sequence attention; row l uses query ``Q[l]``."""
    Q, K, V = _seq(Q, "Q"), _seq(K, "K"), _seq(V, "V")
    _check_kv(K, V)
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q width {Q.shape[1]} differs from K width {K.shape[1]}")
    if mode == SM:
        return sm_weights(spec, K, Q) @ V
    if mode == CME:
        if lam is None or not lam > 0:
            raise ValueError("CME attention needs lam > 0")
        A = spd_solve(gram(spec, K), cross_matrix(spec, K, Q), ridge=lam)
        return A.T @ V
    raise ValueError(f"unknown attention mode {mode!r}")


# ---------------------------------------------------------------------------
# Multihead attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionHeadParams:
    """Query/key projections ``d x d_p`` and value projection ``d x d``."""

    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray

    def __post_init__(self):
        self.W_q = np.asarray(self.W_q, dtype=np.float64)
        self.W_k = np.asarray(self.W_k, dtype=np.float64)
        self.W_v = np.asarray(self.W_v, dtype=np.float64)
        d = self.W_q.shape[0]
        if self.W_k.shape != self.W_q.shape:
            raise ValueError("W_q and W_k must share a shape")
        if self.W_v.shape != (d, d):
            raise ValueError(f"W_v must be {d}x{d}, got {self.W_v.shape}")


@dataclass
class MultiheadParams:
    """A list of heads plus optional concatenation-form factors.

    ``concat`` holds ``(W_tilde_v, W_o)`` per head with ``W_tilde_v`` of shape
    ``d x d_p`` and ``W_o`` of shape ``d_p x d``.  When present the value maps
    must satisfy ``W_v = W_tilde_v @ W_o``.
    """

    heads: List[AttentionHeadParams]
    concat: Optional[List[Tuple[np.ndarray, np.ndarray]]] = field(default=None)

    def __post_init__(self):
        if len(self.heads) < 1:
            raise ValueError("need at least one head")
        d, dp = self.heads[0].W_q.shape
        for hp in self.heads:
            if hp.W_q.shape != (d, dp):
                raise ValueError("all heads must share (d, d_p)")
        if self.concat is not None:
            if len(self.concat) != len(self.heads):
                raise ValueError("concat factors must match the head count")
            for hp, (wt, wo) in zip(self.heads, self.concat):
                if not np.allclose(np.asarray(wt) @ np.asarray(wo), hp.W_v, rtol=1e-12, atol=1e-12):
                    raise ValueError("W_v must equal W_tilde_v @ W_o for every head")

    @property
    def h(self) -> int:
        return len(self.heads)

    @property
    def d(self) -> int:
        return self.heads[0].W_q.shape[0]

    @property
    def d_p(self) -> int:
        return self.heads[0].W_q.shape[1]

    @classmethod
    def from_concat(cls, W_q: Sequence, W_k: Sequence, W_tilde_v: Sequence, W_o: Sequence) -> "MultiheadParams":
        """Build heads from concatenation-form factors, setting ``W_v = W~_v W_o``."""
        heads = [
            AttentionHeadParams(q, k, np.asarray(wt) @ np.asarray(wo))
            for q, k, wt, wo in zip(W_q, W_k, W_tilde_v, W_o)
        ]
        concat = [(np.asarray(wt, float), np.asarray(wo, float)) for wt, wo in zip(W_tilde_v, W_o)]
        return cls(heads, concat)


def _check_heads(X: np.ndarray, params: MultiheadParams, strict_dims: bool) -> None:
    if X.shape[1] != params.d:
        raise ValueError(f"X has width {X.shape[1]}, heads expect {params.d}")
    if strict_dims and params.d != params.d_p * params.h:
        raise ValueError(f"d = {params.d} must equal d_p * h = {params.d_p * params.h}")


def mha(X, params: MultiheadParams, spec: KernelSpec, mode: str = SM,
        lam: Optional[float] = None, strict_dims: bool = True) -> np.ndarray:
    """Summation-form multihead attention ``sum_i attn(X Wq_i, X Wk_i, X Wv_i)``."""
    X = _seq(X, "X")
    _check_heads(X, params, strict_dims)
    out = np.zeros_like(X)
    for hp in params.heads:
        out += attn_seq(X @ hp.W_q, X @ hp.W_k, X @ hp.W_v, spec, mode, lam)
    return out


def mha_concat(X, params: MultiheadParams, spec: KernelSpec, mode: str = SM,
               lam: Optional[float] = None) -> np.ndarray:
    """Concatenation-form multihead attention.

    Each head attends with the narrow values ``X W~_v`` (width d_p); the head
    outputs are concatenated along features and mapped back to width d by the
    stacked output projection.
    """
    if params.concat is None:
        raise ValueError("params carry no concatenation-form factors")
    X = _seq(X, "X")
    _check_heads(X, params, True)
    narrow = [
        attn_seq(X @ hp.W_q, X @ hp.W_k, X @ wt, spec, mode, lam)
        for hp, (wt, _) in zip(params.heads, params.concat)
    ]
    W_o = np.vstack([wo for _, wo in params.concat])
    return np.hstack(narrow) @ W_o


def mha_query(q_token, X, params: MultiheadParams, spec: KernelSpec, mode: str = SM,
              lam: Optional[float] = None) -> np.ndarray:
    """Multihead attention of a single query token over the sequence ``X``."""
    q_token = _vector(q_token, "q_token")
    X = _seq(X, "X")
    out = np.zeros(params.d)
    for hp in params.heads:
        out += attn_seq((q_token @ hp.W_q)[None, :], X @ hp.W_k, X @ hp.W_v, spec, mode, lam)[0]
    return out


def singlehead_linear_limit(W_k, W_v, q) -> np.ndarray:
    """Large-L limit ``((W_k)^{-1} W_v)^T q`` of single-head attention.

    Raises ``np.linalg.LinAlgError`` when ``W_k`` has a 2-norm condition
    number above 1e12.
    """
    W_k = np.asarray(W_k, dtype=np.float64)
    W_v = np.asarray(W_v, dtype=np.float64)
    q = _vector(q, "q")
    if W_k.ndim != 2 or W_k.shape[0] != W_k.shape[1]:
        raise ValueError("W_k must be square")
    cond = float(np.linalg.cond(W_k))
    if not cond <= SINGULAR_CONDITION:
        raise np.linalg.LinAlgError(f"W_k is near-singular (condition number {cond:.3e})")
    return np.linalg.solve(W_k, W_v).T @ q
