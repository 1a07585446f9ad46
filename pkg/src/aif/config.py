"""Configuration: model dimensions, feature-universe sizes, stage costs.

The on-disk format is plain text, one ``key = value`` per line; ``#`` starts a
comment. Keys are the field names of :class:`AIFConfig` and
:class:`StageCostConfig` (they share one flat namespace). Unknown keys are
rejected. Example::

    # desk-scale run
    num_items = 4096
    candidates = 1024
    retrieval_ms = 30
    mini_batch_size = 256
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass(frozen=True)
class StageCostConfig:
    """Virtual delays (ms) charged per stage. Fetch/forward costs are per mini-batch."""

    retrieval_ms: float = 30.0
    user_fetch_ms: float = 6.0
    user_forward_ms: float = 4.0
    item_fetch_ms: float = 5.0
    item_forward_ms: float = 3.0
    prerank_forward_ms: float = 4.0
    parse_base_ms: float = 0.2
    parse_per_event_ms: float = 0.0005
    mini_batch_size: int = 1000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.mini_batch_size < 1:
            raise ValueError("mini_batch_size must be >= 1")

    def parse_cost(self, length: int) -> float:
        return self.parse_base_ms + self.parse_per_event_ms * length


@dataclass(frozen=True)
class AIFConfig:
    # feature universe
    seed: int = 20231001
    num_users: int = 64
    num_items: int = 4096
    num_categories: int = 32
    min_user_categories: int = 12
    max_user_categories: int = 24
    feature_dim: int = 16  # per-feature embedding width
    profile_features: int = 8  # user profile width = profile_features * feature_dim
    attribute_features: int = 4  # item width = attribute_features * feature_dim
    bucket_count: int = 1 << 16
    seq_len: int = 64  # l
    long_seq_len: int = 4096  # L
    # model
    model_seed: int = 7
    model_version: int = 1
    d: int = 32
    item_hidden: int = 48
    head_hidden: int = 64
    bea_dim: int = 16  # d' of the bridge-embedding user vectors
    bridges: int = 8  # n
    mm_dim: int = 64
    lsh_bits: int = 32  # d' of the LSH signature
    lsh_seed: int = 99
    tiers: int = 16  # N
    # serving
    candidates: int = 1024  # b
    user_cache_capacity: int = 100_000
    concurrent_users: int = 8
    sim_cache_capacity: int = 0  # 0 = derive from concurrent_users
    precache: bool = True
    # benchmark
    arrival_rate_qps: float = 50.0
    workers: int = 4
    sla_p99_ms: float = 100.0
    qps_search_iterations: int = 8
    costs: StageCostConfig = field(default_factory=StageCostConfig)

    def __post_init__(self):
        if self.lsh_bits % 8:
            raise ValueError("lsh_bits must be a multiple of 8")
        if self.seq_len > self.long_seq_len:
            raise ValueError("seq_len must not exceed long_seq_len")
        if self.profile_features < 1:
            raise ValueError("profile_features must be >= 1")
        if not 1 <= self.min_user_categories <= self.max_user_categories <= self.num_categories:
            raise ValueError("user category bounds out of range")

    @property
    def user_dim(self) -> int:
        return self.profile_features * self.feature_dim

    @property
    def item_dim(self) -> int:
        return self.attribute_features * self.feature_dim

    @property
    def head_input_dim(self) -> int:
        # [u_self | u_profile_attn | item vec | bea | lsh-din | simtier | raw item]
        return 2 * self.d + self.d + self.bea_dim + self.d + self.tiers + self.item_dim

    @property
    def sim_capacity(self) -> int:
        if self.sim_cache_capacity:
            return self.sim_cache_capacity
        mean_cats = (self.min_user_categories + self.max_user_categories) / 2
        return int(3 * self.concurrent_users * mean_cats)

    def replace(self, **changes) -> "AIFConfig":
        cost_names = {f.name for f in fields(StageCostConfig)}
        cost_changes = {k: changes.pop(k) for k in list(changes) if k in cost_names}
        cfg = dataclasses.replace(self, **changes)
        if cost_changes:
            cfg = dataclasses.replace(cfg, costs=dataclasses.replace(cfg.costs, **cost_changes))
        return cfg


def _coerce(raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    raise TypeError(typ)


def _field_types():
    types = {f.name: f.type for f in fields(AIFConfig) if f.name != "costs"}
    types.update({f.name: f.type for f in fields(StageCostConfig)})
    return types


def parse_config(text: str) -> AIFConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, types[key])
    return AIFConfig().replace(**values)


def load_config(path) -> AIFConfig:
    if path is None:
        return AIFConfig()
    return parse_config(Path(path).read_text())


def dump_config(cfg: AIFConfig) -> str:
    lines = []
    for f in fields(AIFConfig):
        if f.name != "costs":
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for f in fields(StageCostConfig):
        lines.append(f"{f.name} = {getattr(cfg.costs, f.name)}")
    return "\n".join(lines) + "\n"
