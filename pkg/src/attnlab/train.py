"""Gradient-descent training, the SSL pretrain/downstream pipeline and diagnostics.

The model is evaluated on a whole batch at once: token sequences are stacked
into an ``(n, L, d)`` array and every layer runs through the tape with
broadcasting matmuls.  The objective is the mean over the batch of
``||y - f(X)||_2^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, Tensor
from .kernels import EXPONENTIAL, RBF, KernelSpec
from .latent import Episode
from .linalg import spectral_norm
from .rng import SeedLike, generator
from .transformer import TransformerParams

SUPERVISED = "supervised"
SSL = "ssl"


class TrainingDiverged(RuntimeError):
    """Loss exceeded the divergence threshold; ``diagnostics`` has the details."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Stacked sequences ``X`` (n, L, d), targets ``Y`` (n, d_y), optional query tokens."""

    X: np.ndarray
    Y: np.ndarray
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 3 or self.Y.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X must be (n, L, d) and Y must be (n, d_y) with matching n")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float64)
            if self.masks.shape != (self.X.shape[0], self.X.shape[2]):
                raise ValueError("masks must be (n, d)")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx], None if self.masks is None else self.masks[idx])


def episode_tokens(ep: Episode, upto: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Tokens ``[c, r]`` for the first ``upto`` positions and the mask row ``[c_mask, 0]``."""
    L = ep.C.shape[0] if upto is None else upto
    tokens = np.hstack([ep.C[:L], ep.R[:L]])
    mask = np.concatenate([ep.c_mask, np.zeros(ep.R.shape[1])])
    return tokens, mask


def dataset_from_episodes(episodes: Sequence[Episode], query: bool = False,
                          target_map: Optional[np.ndarray] = None,
                          target_scale: float = 1.0) -> Dataset:
    """Stack episodes into a :class:`Dataset`.

    With ``query=False`` the mask row is appended to the sequence (for
    mean pooling); with ``query=True`` it is returned separately as the
    query token.  Targets are ``target_scale * target_map @ y``.
    """
    Xs, Ms, Ys = [], [], []
    for ep in episodes:
        tokens, mask = episode_tokens(ep)
        y = ep.y if target_map is None else np.asarray(target_map) @ ep.y
        Ys.append(target_scale * y)
        if query:
            Xs.append(tokens)
            Ms.append(mask)
        else:
            Xs.append(np.vstack([tokens, mask]))
    return Dataset(np.stack(Xs), np.stack(Ys), np.stack(Ms) if query else None)


def pretrain_dataset(episodes: Sequence[Episode], target_scale: float = 1.0) -> Dataset:
    """Predict the last response from the first ``L - 1`` tokens and ``[c^L, 0]``."""
    Xs, Ms, Ys = [], [], []
    for ep in episodes:
        L = ep.C.shape[0]
        if L < 2:
            raise ValueError("pretraining needs L >= 2")
        Xs.append(np.hstack([ep.C[: L - 1], ep.R[: L - 1]]))
        Ms.append(np.concatenate([ep.C[L - 1], np.zeros(ep.R.shape[1])]))
        Ys.append(target_scale * ep.R[L - 1])
    return Dataset(np.stack(Xs), np.stack(Ys), np.stack(Ms))


def downstream_dataset(episodes: Sequence[Episode], target_map: Optional[np.ndarray] = None,
                       target_scale: float = 1.0) -> Dataset:
    """Same inputs as pretraining, but the query is ``[c_mask, 0]`` and the target ``G y``."""
    Xs, Ms, Ys = [], [], []
    for ep in episodes:
        L = ep.C.shape[0]
        Xs.append(np.hstack([ep.C[: L - 1], ep.R[: L - 1]]))
        Ms.append(np.concatenate([ep.c_mask, np.zeros(ep.R.shape[1])]))
        y = ep.y if target_map is None else np.asarray(target_map) @ ep.y
        Ys.append(target_scale * y)
    return Dataset(np.stack(Xs), np.stack(Ys), np.stack(Ms))


# ---------------------------------------------------------------------------
# Model on the tape
# ---------------------------------------------------------------------------


def _logits(tape: Tape, Q: Tensor, K: Tensor, spec: KernelSpec) -> Tensor:
    scores = tape.matmul(Q, tape.transpose(K))
    if spec.family == EXPONENTIAL:
        return tape.scale(scores, 1.0 / spec.kernel_temperature)
    if spec.family == RBF:
        # -||q - k||^2 / 2 sigma^2 up to a per-query constant, which softmax ignores
        knorm = tape.transpose(tape.sum(tape.square(K), axis=-1, keepdims=True))
        return tape.scale(tape.sub(tape.scale(scores, 2.0), knorm), 1.0 / (2.0 * spec.bandwidth**2))
    raise ValueError("training supports the exponential and rbf kernels only")


def _heads(tape: Tape, pv: Dict[str, Tensor], prefix: str, Xq: Tensor, X: Tensor,
           spec: KernelSpec) -> Tensor:
    out = None
    i = 0
    while f"{prefix}head{i}.W_q" in pv:
        Q = tape.matmul(Xq, pv[f"{prefix}head{i}.W_q"])
        K = tape.matmul(X, pv[f"{prefix}head{i}.W_k"])
        V = tape.matmul(X, pv[f"{prefix}head{i}.W_v"])
        head = tape.matmul(tape.softmax(_logits(tape, Q, K, spec)), V)
        out = head if out is None else tape.add(out, head)
        i += 1
    return out


def tape_forward(tape: Tape, pv: Dict[str, Tensor], T: int, X: np.ndarray, spec: KernelSpec,
                 masks: Optional[np.ndarray] = None) -> Tensor:
    """Batched model output ``(n, d_y)`` recorded on ``tape``."""
    cur = tape.constant(X)
    for t in range(T):
        hidden = tape.add(
            tape.matmul(tape.relu(tape.matmul(cur, pv[f"layer{t}.A_x"])), pv[f"layer{t}.A_sigma"]), cur)
        cur = tape.add(_heads(tape, pv, f"layer{t}.", hidden, hidden, spec), hidden)
    if "agg_head.head0.W_q" in pv:
        if masks is None:
            raise ValueError("masked-query aggregation needs query tokens")
        q = tape.constant(masks[:, None, :])
        pooled = tape.sum(_heads(tape, pv, "agg_head.", q, cur, spec), axis=1)
    else:
        pooled = tape.mean(cur, axis=1)
    return tape.scale(tape.tanh(tape.matmul(pooled, pv["agg_w"])), 0.5)


def _record(params: TransformerParams, trainable: Optional[Sequence[str]]):
    tape = Tape()
    names = list(params.to_dict())
    train_set = set(names if trainable is None else trainable)
    unknown = train_set - set(names)
    if unknown:
        raise KeyError(f"unknown parameter names: {sorted(unknown)}")
    pv = {k: (tape.variable(v, k) if k in train_set else tape.constant(v))
          for k, v in params.to_dict().items()}
    return tape, pv, [k for k in names if k in train_set]


def predict(params: TransformerParams, X, spec: KernelSpec, masks=None) -> np.ndarray:
    """Batched outputs ``(n, d_y)`` without recording gradients."""
    tape, pv, _ = _record(params, [])
    return tape_forward(tape, pv, params.T, np.asarray(X, dtype=np.float64), spec, masks).value


def mse(params: TransformerParams, data: Dataset, spec: KernelSpec) -> float:
    """Mean over the batch of ``||y - f(X)||_2^2``."""
    diff = predict(params, data.X, spec, data.masks) - data.Y
    return float(np.mean(np.sum(diff * diff, axis=1)))


def grad(params: TransformerParams, data: Dataset, spec: KernelSpec,
         trainable: Optional[Sequence[str]] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and exact reverse-mode gradients for the parameters in ``trainable``."""
    tape, pv, names = _record(params, trainable)
    out = tape_forward(tape, pv, params.T, data.X, spec, data.masks)
    resid = tape.sub(out, data.Y)
    loss = tape.scale(tape.sum(tape.square(resid)), 1.0 / data.n)
    tape.backward(loss)
    grads = {k: (pv[k].grad if pv[k].grad is not None else np.zeros_like(pv[k].value)) for k in names}
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 0.05
    batch_size: Optional[int] = None
    seed: int = 0
    momentum: float = 0.0
    objective: str = "mse"
    pipeline: str = SUPERVISED
    diverge_factor: float = 1e3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be finite and nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.objective != "mse":
            raise ValueError("only the mse objective is supported")
        if self.pipeline not in (SUPERVISED, SSL):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class TrainResult:
    params: TransformerParams
    curve: List[float]
    report: Dict[str, float] = field(default_factory=dict)


def train_supervised(params: TransformerParams, data: Dataset, cfg: TrainConfig, spec: KernelSpec,
                     heldout: Optional[Dataset] = None,
                     trainable: Optional[Sequence[str]] = None) -> TrainResult:
    """Plain (momentum) gradient descent on the batch MSE.

    ``curve[k]`` is the full-batch training loss before step ``k``, and the
    final entry is the loss after the last step.  The input ``params`` are
    not modified.
    """
    p = params.copy()
    tensors = p.to_dict()
    g = generator(cfg.seed)
    velocity: Dict[str, np.ndarray] = {}
    curve: List[float] = []
    initial = None
    for step in range(cfg.steps):
        batch = data
        if cfg.batch_size is not None and cfg.batch_size < data.n:
            batch = data.subset(np.sort(g.choice(data.n, cfg.batch_size, replace=False)))
        loss, grads = grad(p, batch, spec, trainable)
        full = loss if batch is data else mse(p, data, spec)
        if initial is None:
            initial = full
        if not math.isfinite(full) or full > cfg.diverge_factor * max(initial, 1e-300):
            raise TrainingDiverged(
                f"loss {full:.3e} exceeded {cfg.diverge_factor:g} x initial {initial:.3e} at step {step}",
                {"step": step, "loss": full, "initial": initial, "curve": list(curve)},
            )
        curve.append(full)
        for name, gr in grads.items():
            v = velocity.get(name)
            v = gr if v is None else cfg.momentum * v + gr
            velocity[name] = v
            tensors[name] -= cfg.lr * v
    curve.append(mse(p, data, spec))
    report = {"train_loss": curve[-1], "initial_loss": curve[0], "steps": float(cfg.steps)}
    drops = [b <= a for a, b in zip(curve[:-1], curve[1:])]
    report["fraction_nonincreasing"] = float(np.mean(drops))
    if heldout is not None:
        report["heldout_loss"] = mse(p, heldout, spec)
        report["gap"] = report["heldout_loss"] - report["train_loss"]
    return TrainResult(p, curve, report)


# ---------------------------------------------------------------------------
# Self-supervised pretraining and transfer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SSLConfig:
    pretrain: TrainConfig = TrainConfig(steps=600, lr=0.5, pipeline=SSL)
    downstream: TrainConfig = TrainConfig(steps=600, lr=0.5, pipeline=SSL)


@dataclass
class SSLResult:
    theta_pt: TransformerParams
    downstream: TransformerParams
    baseline: TransformerParams
    report: Dict[str, float]


def _with_readout(params: TransformerParams, d_y: int) -> TransformerParams:
    p = params.copy()
    p.agg_w = np.zeros((p.d, d_y))
    return p


def frozen_names(params: TransformerParams) -> List[str]:
    return [k for k in params.to_dict() if k != "agg_w"]


def ssl_pipeline(params: TransformerParams, pretrain: Dataset, downstream: Dataset, test: Dataset,
                 cfg: SSLConfig, spec: KernelSpec, pretrain_trainable: Optional[Sequence[str]] = None
                 ) -> SSLResult:
    """Pretrain, freeze everything but the readout, then fit the downstream readout.

    The same downstream fit is repeated on the untrained ``params``
    (random-frozen attention) as a baseline.  Both readouts start at zero.
    """
    if pretrain.X.shape[1] < 1:
        raise ValueError("pretraining needs at least one context token (L >= 2)")
    pt = train_supervised(params, pretrain, cfg.pretrain, spec, trainable=pretrain_trainable)
    theta_pt = pt.params
    d_y = downstream.Y.shape[1]
    ds_start = _with_readout(theta_pt, d_y)
    ds = train_supervised(ds_start, downstream, cfg.downstream, spec, trainable=["agg_w"])
    base_start = _with_readout(params, d_y)
    base = train_supervised(base_start, downstream, cfg.downstream, spec, trainable=["agg_w"])
    frozen_ok = all(
        np.array_equal(ds.params.to_dict()[k], theta_pt.to_dict()[k]) for k in frozen_names(theta_pt)
    )
    report = {
        "pretrain_loss": pt.curve[-1],
        "downstream_train_mse": ds.curve[-1],
        "downstream_test_mse_pretrained": mse(ds.params, test, spec),
        "downstream_test_mse_random": mse(base.params, test, spec),
        "frozen_ok": float(frozen_ok),
    }
    report["transfer_advantage"] = report["downstream_test_mse_random"] - report["downstream_test_mse_pretrained"]
    return SSLResult(theta_pt, ds.params, base.params, report)


def condition_number(W_DS, W_SSL) -> float:
    """``mu = ||W_DS^T (W_SSL W_SSL^T)^{-1} W_SSL||_2^2``, pseudoinverse if singular."""
    W_DS = np.asarray(W_DS, dtype=np.float64)
    W_SSL = np.asarray(W_SSL, dtype=np.float64)
    if W_DS.ndim == 1:
        W_DS = W_DS[:, None]
    if W_DS.shape[0] != W_SSL.shape[0]:
        raise ValueError("W_DS and W_SSL must have the same number of rows")
    S = W_SSL @ W_SSL.T
    if np.linalg.cond(S) < 1e12:
        inner = np.linalg.solve(S, W_SSL)
    else:
        inner = np.linalg.pinv(S) @ W_SSL
    B = W_DS.T @ inner
    if not np.any(B):
        return 0.0
    return spectral_norm(B, tol=1e-14) ** 2


# ---------------------------------------------------------------------------
# Stationarity diagnostics
# ---------------------------------------------------------------------------


def _flatten(d: Dict[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.ravel(d[k]) for k in names]) if names else np.zeros(0)


def jacobian(params: TransformerParams, data: Dataset, spec: KernelSpec,
             trainable: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Outputs ``f`` (n, d_y) and Jacobian ``J`` (n * d_y, n_params) by reverse mode."""
    tape, pv, names = _record(params, trainable)
    out = tape_forward(tape, pv, params.T, data.X, spec, data.masks)
    f = out.value.copy()
    rows = []
    for idx in np.ndindex(*f.shape):
        tape.reset()
        seed = np.zeros_like(f)
        seed[idx] = 1.0
        tape.backward(out, seed)
        rows.append(_flatten({k: (pv[k].grad if pv[k].grad is not None else np.zeros_like(pv[k].value))
                              for k in names}, names))
    return f, np.array(rows), names


def stationarity_probe(params: TransformerParams, data: Dataset, spec: KernelSpec, probes: int,
                       seed: SeedLike, radius: Optional[float] = None,
                       trainable: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """Gradient norm and the linearized-fit surrogate at ``params``.

    The surrogate at ``theta`` is ``sqrt(mean_i ||f_i + J_i (theta - theta_hat) - y_i||^2)``
    with the empirical targets ``y`` in place of the unknown regression
    function, so it upper-bounds the population version by the triangle
    inequality.  The reported value is the minimum over ``theta_hat`` and
    ``probes`` random points in a ball of the given ``radius`` (default:
    10% of ``||theta_hat||``).
    """
    if probes < 0:
        raise ValueError("probes must be nonnegative")
    loss, grads = grad(params, data, spec, trainable)
    names = list(grads)
    gnorm = float(np.linalg.norm(_flatten(grads, names)))
    f, J, names = jacobian(params, data, spec, trainable)
    theta_hat = _flatten(params.to_dict(), names)
    if radius is None:
        radius = 0.1 * max(float(np.linalg.norm(theta_hat)), 1e-12)
    resid0 = (f - data.Y).ravel()
    n = data.n
    surrogate_hat = math.sqrt(float(resid0 @ resid0) / n)
    best = surrogate_hat
    best_loss = loss
    g = generator(seed)
    for _ in range(probes):
        u = g.standard_normal(theta_hat.size)
        u *= radius * math.sqrt(g.uniform()) / max(float(np.linalg.norm(u)), 1e-300)
        r = resid0 + J @ u
        best = min(best, math.sqrt(float(r @ r) / n))
        probe = params.copy()
        tensors = probe.to_dict()
        offset = 0
        for k in names:
            size = tensors[k].size
            tensors[k] += u[offset: offset + size].reshape(tensors[k].shape)
            offset += size
        best_loss = min(best_loss, mse(probe, data, spec))
    return {
        "grad_norm": gnorm,
        "surrogate": best,
        "surrogate_at_hat": surrogate_hat,
        "train_loss": loss,
        "optimization_error": loss - best_loss,
        "probes": float(probes),
    }
