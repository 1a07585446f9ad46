"""Dense linear algebra and attention primitives.

Matrices are 2-D C-contiguous ``float32`` numpy arrays. Dot products
accumulate in float64 in a fixed sequential order, so a row of a product
never depends on how many other rows were computed alongside it. Everything
downstream leans on that: the sequential and asynchronous pipelines batch
differently and still have to agree bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass
class MacCounter:
    """Tallies multiply-adds performed by instrumented operations."""

    macs: int = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a, b, transpose_b: bool = False, counter: MacCounter | None = None) -> np.ndarray:
    """Matrix product ``a @ b`` (or ``a @ b.T`` with ``transpose_b``)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    bt = b if transpose_b else b.T
    if a.shape[1] != bt.shape[1]:
        raise ShapeError(
            f"inner dimensions differ: {a.shape} x {b.shape}"
            + (" (transposed)" if transpose_b else "")
        )
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1] * bt.shape[0])
    return kernels.matmul_nt(a, bt)


def _softmax64(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] == 0:
        return x.copy()
    return _softmax64(x.astype(np.float64)).astype(np.float32)


def attention_weights(q, k, scale: float, counter: MacCounter | None = None) -> np.ndarray:
    """``softmax_rows(q @ k.T / scale)``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    logits = matmul(q, k, transpose_b=True, counter=counter)
    if logits.shape[1] == 0:
        return logits
    return _softmax64(logits.astype(np.float64) / float(scale)).astype(np.float32)


def scaled_attention(q, k, v, scale: float, counter: MacCounter | None = None) -> np.ndarray:
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q and k widths differ: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k and v lengths differ: {k.shape[0]} vs {v.shape[0]}")
    weights = attention_weights(q, k, scale, counter=counter)
    return matmul(weights, v, counter=counter)


Layer = tuple  # (weights: in x out, bias: out, activation)


def mlp_forward(x, layers: Sequence[Layer], counter: MacCounter | None = None) -> np.ndarray:
    """Apply ``act(x @ W + b)`` for each layer in turn."""
    h = as_matrix(x, "x")
    for idx, (weights, bias, activation) in enumerate(layers):
        weights = as_matrix(weights, f"layer {idx} weights")
        bias = np.asarray(bias, dtype=np.float32).reshape(-1)
        if h.shape[1] != weights.shape[0]:
            raise ShapeError(
                f"layer {idx} expects width {weights.shape[0]}, got {h.shape[1]}"
            )
        if bias.shape[0] != weights.shape[1]:
            raise ShapeError(f"layer {idx} bias has width {bias.shape[0]}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        h = matmul(h, weights, counter=counter) + bias
        if activation == "relu":
            h = np.maximum(h, np.float32(0.0))
    return np.ascontiguousarray(h, dtype=np.float32)


def mean_pool_rows(x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[0] < 1:
        raise ValueError("mean_pool_rows needs at least one row")
    total = np.zeros(x.shape[1], dtype=np.float64)
    for row in x.astype(np.float64):
        total += row
    return (total / x.shape[0]).astype(np.float32)[None, :]


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Seeded normal init scaled by ``1/sqrt(fan_in)``, shaped ``fan_in x fan_out``."""
    scale = 1.0 / math.sqrt(max(fan_in, 1))
    return (rng.standard_normal((fan_in, fan_out)) * scale).astype(np.float32)
