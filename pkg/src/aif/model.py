"""Seeded model parameters for the pre-ranking network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import AIFConfig
from .core import init_dense


@dataclass(frozen=True, eq=False)
class ModelParams:
    model_version: int
    w_profile: np.ndarray  # d x dU
    w_seq: np.ndarray  # d x dU, shared by the projection and LSH-DIN
    ffn: tuple  # self-attention FFN: d -> d (relu) -> d
    item_mlp: tuple  # dI -> hidden (relu) -> d
    bridges: np.ndarray  # n x d
    bea_mlp: tuple  # shared f: d -> d (relu) -> bea_dim
    head: tuple  # head_input_dim -> hidden (relu) -> 1

    @property
    def d(self) -> int:
        return self.w_profile.shape[0]

    @property
    def n_bridges(self) -> int:
        return self.bridges.shape[0]


def _zeros(n):
    return np.zeros(n, dtype=np.float32)


def _bias(rng, n):
    return (0.01 * rng.standard_normal(n)).astype(np.float32)


def init_model(cfg: AIFConfig, model_version: int | None = None) -> ModelParams:
    version = cfg.model_version if model_version is None else model_version
    rng = np.random.default_rng([cfg.model_seed, version])
    d, du, di = cfg.d, cfg.user_dim, cfg.item_dim
    return ModelParams(
        model_version=version,
        w_profile=init_dense(rng, du, d).T.copy(),
        w_seq=init_dense(rng, du, d).T.copy(),
        ffn=(
            (init_dense(rng, d, d), _bias(rng, d), "relu"),
            (init_dense(rng, d, d), _zeros(d), "identity"),
        ),
        item_mlp=(
            (init_dense(rng, di, cfg.item_hidden), _bias(rng, cfg.item_hidden), "relu"),
            (init_dense(rng, cfg.item_hidden, d), _zeros(d), "identity"),
        ),
        # bridges start as standard normal draws
        bridges=rng.standard_normal((cfg.bridges, d)).astype(np.float32),
        bea_mlp=(
            (init_dense(rng, d, d), _bias(rng, d), "relu"),
            (init_dense(rng, d, cfg.bea_dim), _zeros(cfg.bea_dim), "identity"),
        ),
        head=(
            (init_dense(rng, cfg.head_input_dim, cfg.head_hidden), _bias(rng, cfg.head_hidden), "relu"),
            (init_dense(rng, cfg.head_hidden, 1), _zeros(1), "identity"),
        ),
    )
