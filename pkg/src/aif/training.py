"""Rank-alignment loss and a desk-scale trainer for the head and bridges.

The loss sums, over candidate pairs ``(i, j)`` where the ranking stage puts
``i`` above ``j``::

    dNDCG(i, j) * log(1 + exp(-(y_i * bid_i / (y_j * bid_j) - 1)))

with ``dNDCG(i, j) = |g_i - g_j| * |1/log2(1 + r_i) - 1/log2(1 + r_j)|``.
``g`` is the gain from the ranking-stage position (``1/log2(1 + pos)`` for
the top ``k`` relevant items, 0 otherwise) and ``r`` is the current
pre-ranking position by ``y * bid``. Positions are 1-based.

The trainer runs in float64 with hand-written backpropagation. The
dNDCG weights are treated as constants within a step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

RELEVANT_K = 10


def _gains(positions: np.ndarray, relevant_k: int | None) -> np.ndarray:
    g = 1.0 / np.log2(1.0 + positions)
    if relevant_k is not None:
        g = np.where(positions <= relevant_k, g, 0.0)
    return g


def prerank_positions(item_ids, ecpm) -> np.ndarray:
    """1-based position of each candidate by descending ``y * bid`` (ties: lower id first)."""
    item_ids = np.asarray(item_ids)
    order = np.lexsort((item_ids, -np.asarray(ecpm, dtype=np.float64)))
    pos = np.empty(len(order), dtype=np.float64)
    pos[order] = np.arange(1, len(order) + 1)
    return pos


def delta_ndcg_matrix(teacher_pos, prerank_pos, relevant_k: int | None = RELEVANT_K) -> np.ndarray:
    """``D[i, j]`` for all candidate pairs (symmetric)."""
    g = _gains(np.asarray(teacher_pos, dtype=np.float64), relevant_k)
    disc = 1.0 / np.log2(1.0 + np.asarray(prerank_pos, dtype=np.float64))
    return np.abs(g[:, None] - g[None, :]) * np.abs(disc[:, None] - disc[None, :])


def _check(y, bid):
    y = np.asarray(y, dtype=np.float64)
    bid = np.asarray(bid, dtype=np.float64)
    if y.shape != bid.shape:
        raise ContractError("scores and bids differ in length")
    if np.any(~np.isfinite(bid)) or np.any(bid <= 0):
        raise ContractError("bids must be positive")
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise ContractError("scores must be positive for the ratio form")
    return y, bid


def copr_terms(y, bid, teacher_pos, relevant_k: int | None = RELEVANT_K, weights=None):
    """Pair mask, pair weights and ratio matrix shared by the loss and its gradient."""
    y, bid = _check(y, bid)
    teacher_pos = np.asarray(teacher_pos, dtype=np.float64)
    e = y * bid
    if weights is None:
        ids = np.arange(len(y))
        weights = delta_ndcg_matrix(teacher_pos, prerank_positions(ids, e), relevant_k)
    above = teacher_pos[:, None] < teacher_pos[None, :]
    ratio = e[:, None] / e[None, :]
    return above, weights, ratio


def copr_loss_arrays(y, bid, teacher_pos, relevant_k: int | None = RELEVANT_K, weights=None) -> float:
    above, w, ratio = copr_terms(y, bid, teacher_pos, relevant_k, weights)
    if not above.any():
        return 0.0
    return float(np.sum(w[above] * np.logaddexp(0.0, -(ratio[above] - 1.0))))


def copr_loss(scored, relevance, relevant_k: int | None = RELEVANT_K) -> float:
    """Loss for ``ScoredCandidate``s given the ranking-stage order of item ids."""
    scored = list(scored)
    if len(scored) < 2:
        _check([c.score for c in scored], [c.bid for c in scored])
        return 0.0
    pos = {int(item): k + 1 for k, item in enumerate(relevance)}
    missing = [c.item_id for c in scored if c.item_id not in pos]
    if missing:
        raise ContractError(f"no ranking-stage position for items {missing[:5]}")
    y = np.array([c.score for c in scored])
    bid = np.array([c.bid for c in scored])
    ids = np.array([c.item_id for c in scored])
    teacher = np.array([pos[c.item_id] for c in scored], dtype=np.float64)
    y, bid = _check(y, bid)
    w = delta_ndcg_matrix(teacher, prerank_positions(ids, y * bid), relevant_k)
    return copr_loss_arrays(y, bid, teacher, relevant_k, w)


def copr_grad_y(y, bid, teacher_pos, weights, relevant_k: int | None = RELEVANT_K) -> np.ndarray:
    """dL/dy with the pair weights held fixed."""
    above, w, ratio = copr_terms(y, bid, teacher_pos, relevant_k, weights)
    y = np.asarray(y, dtype=np.float64)
    # d softplus(1 - r)/dr = -sigmoid(1 - r)
    dr = np.where(above, -w * np.exp(-np.logaddexp(0.0, ratio - 1.0)), 0.0)
    coef = dr * ratio
    return (coef.sum(axis=1) - coef.sum(axis=0)) / y


# generic optimizer -------------------------------------------------------------------

@dataclass
class DescentResult:
    x: np.ndarray
    losses: list
    diverged: bool = False


def gradient_descent(loss_and_grad, x0, lr: float, steps: int, divergence_factor: float = 10.0):
    """Plain gradient descent; stops and flags when loss exceeds ``factor`` x initial."""
    x = np.array(x0, dtype=np.float64)
    loss, grad = loss_and_grad(x)
    losses = [float(loss)]
    first = abs(float(loss))
    for _ in range(steps):
        x = x - lr * grad
        loss, grad = loss_and_grad(x)
        losses.append(float(loss))
        if not np.isfinite(loss) or (first > 0 and loss > divergence_factor * first):
            return DescentResult(x, losses, True)
    return DescentResult(x, losses)


# toy problem ---------------------------------------------------------------------------

def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_back(p, dp):
    return p * (dp - np.sum(dp * p, axis=1, keepdims=True))


@dataclass
class ToyBatch:
    """Fixed synthetic batch: user rows, item vectors, side features and a teacher order."""

    U: np.ndarray  # m x d
    I: np.ndarray  # b x d
    X: np.ndarray  # b x k side features
    bid: np.ndarray  # b
    teacher_pos: np.ndarray  # b, 1-based
    f_layers: tuple  # fixed bridge MLP: (W1, b1, W2, b2)


@dataclass
class ToyParams:
    B: np.ndarray  # n x d bridges
    W1: np.ndarray  # (d' + k) x h
    b1: np.ndarray
    w2: np.ndarray  # h
    c: float

    _names = ("B", "W1", "b1", "w2", "c")

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, n)) for n in self._names])

    def unflatten(self, flat) -> "ToyParams":
        out, k = [], 0
        for n in self._names:
            ref = np.asarray(getattr(self, n))
            size = ref.size
            out.append(flat[k : k + size].reshape(ref.shape) if ref.ndim else float(flat[k]))
            k += size
        return ToyParams(*out)


def make_toy_problem(seed: int = 0, b: int = 24, m: int = 8, d: int = 8, n: int = 4,
                     d_prime: int = 4, k: int = 6, hidden: int = 12):
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((m, d))
    I = rng.standard_normal((b, d))
    X = rng.standard_normal((b, k))
    bid = rng.uniform(0.5, 2.0, b)
    teacher_score = X @ rng.standard_normal(k) + I @ rng.standard_normal(d)
    order = np.argsort(-teacher_score, kind="stable")
    teacher_pos = np.empty(b)
    teacher_pos[order] = np.arange(1, b + 1)
    f_layers = (
        rng.standard_normal((d, d)) / math.sqrt(d), 0.01 * rng.standard_normal(d),
        rng.standard_normal((d, d_prime)) / math.sqrt(d), 0.01 * rng.standard_normal(d_prime),
    )
    batch = ToyBatch(U, I, X, bid, teacher_pos, f_layers)
    width = d_prime + k
    params = ToyParams(
        rng.standard_normal((n, d)),
        rng.standard_normal((width, hidden)) / math.sqrt(width),
        np.zeros(hidden),
        rng.standard_normal(hidden) / math.sqrt(hidden),
        0.0,
    )
    return batch, params


def toy_forward(batch: ToyBatch, p: ToyParams, cache: dict | None = None) -> np.ndarray:
    d = batch.U.shape[1]
    scale = math.sqrt(d)
    Wu = _softmax(p.B @ batch.U.T / scale)  # n x m
    H = Wu @ batch.U
    F1, g1, F2, g2 = batch.f_layers
    zf = H @ F1 + g1
    V = np.maximum(zf, 0.0) @ F2 + g2  # n x d'
    w_hat = _softmax(batch.I @ p.B.T / scale)  # b x n
    v_hat = w_hat @ V
    x = np.concatenate([v_hat, batch.X], axis=1)
    z1 = x @ p.W1 + p.b1
    a1 = np.maximum(z1, 0.0)
    s = a1 @ p.w2 + p.c
    y = 1.0 / (1.0 + np.exp(-s))
    if cache is not None:
        cache.update(Wu=Wu, zf=zf, V=V, w_hat=w_hat, x=x, z1=z1, a1=a1, y=y)
    return y


def toy_loss(batch: ToyBatch, p: ToyParams, weights=None) -> float:
    y = toy_forward(batch, p)
    return copr_loss_arrays(y, batch.bid, batch.teacher_pos, weights=weights)


def toy_weights(batch: ToyBatch, p: ToyParams) -> np.ndarray:
    y = toy_forward(batch, p)
    return delta_ndcg_matrix(batch.teacher_pos, prerank_positions(np.arange(len(y)), y * batch.bid))


def toy_loss_and_grad(batch: ToyBatch, p: ToyParams, weights=None):
    """Loss and analytic gradient (as a ``ToyParams``) with pair weights frozen."""
    c: dict = {}
    y = toy_forward(batch, p, c)
    if weights is None:
        weights = delta_ndcg_matrix(batch.teacher_pos, prerank_positions(np.arange(len(y)), y * batch.bid))
    loss = copr_loss_arrays(y, batch.bid, batch.teacher_pos, weights=weights)
    ds = copr_grad_y(y, batch.bid, batch.teacher_pos, weights) * y * (1.0 - y)
    dw2 = c["a1"].T @ ds
    dc = float(ds.sum())
    dz1 = np.outer(ds, p.w2) * (c["z1"] > 0)
    dW1 = c["x"].T @ dz1
    db1 = dz1.sum(axis=0)
    d_prime = c["V"].shape[1]
    dv_hat = (dz1 @ p.W1.T)[:, :d_prime]
    scale = math.sqrt(batch.U.shape[1])
    # item side: v_hat = w_hat V, w_hat = softmax(I B^T / sqrt(d))
    dw_hat = dv_hat @ c["V"].T
    dV = c["w_hat"].T @ dv_hat
    dB = _softmax_back(c["w_hat"], dw_hat).T @ batch.I / scale
    # user side: V = f(Wu U), Wu = softmax(B U^T / sqrt(d))
    F1, _, F2, _ = batch.f_layers
    dzf = (dV @ F2.T) * (c["zf"] > 0)
    dH = dzf @ F1.T
    dWu = dH @ batch.U.T
    dB = dB + _softmax_back(c["Wu"], dWu) @ batch.U / scale
    return loss, ToyParams(dB, dW1, db1, dw2, dc)


def finite_difference_check(batch: ToyBatch, p: ToyParams, n_params: int = 10, seed: int = 0,
                            eps: float = 1e-6):
    """Relative errors between analytic and central-difference partials on random coordinates."""
    weights = toy_weights(batch, p)
    _, grad = toy_loss_and_grad(batch, p, weights)
    g = grad.flatten()
    flat = p.flatten()
    rng = np.random.default_rng(seed)
    errors = []
    for idx in rng.choice(flat.size, size=n_params, replace=False):
        hi, lo = flat.copy(), flat.copy()
        hi[idx] += eps
        lo[idx] -= eps
        num = (toy_loss(batch, p.unflatten(hi), weights) - toy_loss(batch, p.unflatten(lo), weights)) / (2 * eps)
        denom = max(abs(num), abs(g[idx]), 1e-8)
        errors.append(abs(num - g[idx]) / denom)
    return np.array(errors)


@dataclass
class TrainResult:
    losses: list
    diverged: bool
    params: ToyParams = field(repr=False)

    @property
    def decrease_fraction(self) -> float:
        steps = np.diff(self.losses)
        return float(np.mean(steps <= 0)) if len(steps) else 1.0


def toy_train(steps: int = 200, lr: float = 0.05, seed: int = 0) -> TrainResult:
    """Gradient descent on the toy batch; the trajectory holds ``steps + 1`` losses."""
    batch, params = make_toy_problem(seed)

    def loss_and_grad(flat):
        loss, grad = toy_loss_and_grad(batch, params.unflatten(flat))
        return loss, grad.flatten()

    res = gradient_descent(loss_and_grad, params.flatten(), lr, steps)
    return TrainResult(res.losses, res.diverged, params.unflatten(res.x))
