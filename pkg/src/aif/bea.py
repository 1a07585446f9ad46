"""Bridge-embedding approximation of user-item cross-attention.

A small set of bridge vectors stands in for the candidate items. The user
side attends from each bridge to the user's feature rows and produces one
vector per bridge; the item side attends from each item to the bridges and
produces one weight per bridge. Serving is then a ``b x n`` by ``n x d'``
product, with both attention steps moved off the request path.

The two phases take disjoint inputs on purpose: the user phase never sees
items and the item phase never sees user data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import MacCounter, as_matrix, attention_weights, matmul, mlp_forward
from .errors import ShapeError


@dataclass(frozen=True, eq=False)
class BridgeSet:
    B: np.ndarray
    model_version: int = 0

    def __post_init__(self):
        if self.B.ndim != 2 or self.B.shape[0] < 1:
            raise ShapeError("bridge matrix must be n x d with n >= 1")
        if not np.all(np.isfinite(self.B)):
            raise ValueError("bridge embeddings must be finite")

    @property
    def n(self) -> int:
        return self.B.shape[0]


def bea_user_phase(B, U, f_layers, counter: MacCounter | None = None) -> np.ndarray:
    """Per-bridge user vectors ``V = f(W @ U)`` with ``W = softmax(B U^T / sqrt(d))``."""
    B, U = as_matrix(B, "B"), as_matrix(U, "U")
    if U.shape[0] < 1:
        raise ShapeError("user phase needs at least one feature row")
    if B.shape[1] != U.shape[1]:
        raise ShapeError(f"bridge width {B.shape[1]} != user width {U.shape[1]}")
    W = attention_weights(B, U, math.sqrt(B.shape[1]), counter=counter)
    return mlp_forward(matmul(W, U, counter=counter), f_layers, counter=counter)


def bea_item_phase(B, I, counter: MacCounter | None = None) -> np.ndarray:
    """Item-to-bridge weights ``softmax(I B^T / sqrt(d))``, one row per item."""
    B, I = as_matrix(B, "B"), as_matrix(I, "I")
    if B.shape[1] != I.shape[1]:
        raise ShapeError(f"bridge width {B.shape[1]} != item width {I.shape[1]}")
    return attention_weights(I, B, math.sqrt(B.shape[1]), counter=counter)


def bea_serve(w_hat, V, counter: MacCounter | None = None) -> np.ndarray:
    w_hat, V = as_matrix(w_hat, "w_hat"), as_matrix(V, "V")
    if w_hat.shape[1] != V.shape[0]:
        raise ShapeError(f"weights have {w_hat.shape[1]} bridges, V has {V.shape[0]}")
    return matmul(w_hat, V, counter=counter)


def full_cross_oracle(U, I, f_layers, counter: MacCounter | None = None) -> np.ndarray:
    """Reference cross-attention with every item as its own query.

    Costs grow with ``b * m``; used to compare against the bridged version.
    """
    U, I = as_matrix(U, "U"), as_matrix(I, "I")
    if U.shape[1] != I.shape[1]:
        raise ShapeError(f"user width {U.shape[1]} != item width {I.shape[1]}")
    W = attention_weights(I, U, math.sqrt(U.shape[1]), counter=counter)
    return mlp_forward(matmul(W, U, counter=counter), f_layers, counter=counter)


def init_bridges(n: int, d: int, seed: int, model_version: int = 0) -> BridgeSet:
    rng = np.random.default_rng(seed)
    return BridgeSet(rng.standard_normal((n, d)).astype(np.float32), model_version)
