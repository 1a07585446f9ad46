"""Synthetic feature universe.

Embedding tables stand in for trained parameters: each is a seeded
``bucket_count x dim`` matrix and a feature id maps to row
``id mod bucket_count``. Users and items are generated from the config seed,
so two stores built from the same config are element-wise identical.

Store snapshot file (little-endian)::

    b"AIFS"  u32 format_version (=1)
    u32 config_len, config text (utf-8, ``key = value`` lines)
    u64 last_event_seq
    u32 n_items, then per item:
        u64 item_id, u64 category_id, u64 version, f32 bid,
        u32 n_attr, n_attr * u64 feature ids,
        u32 d_mm, d_mm * f32
    u32 n_users, then per user:
        u64 user_id, u32 nick_len, nickname (utf-8),
        u32 n_profile, n_profile * u64,
        u32 l, l * (u64 item_id, u64 category_id, i64 timestamp)
        u32 L, L * (u64 item_id, u64 category_id, i64 timestamp)
    u32 n_events, then per replayed update event:
        u64 event_seq, u64 item_id, i64 category_id (-1 = unchanged),
        u32 n_attr, n_attr * u64, u32 d_mm (0 = no new embedding), d_mm * f32
"""
from __future__ import annotations

import io
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import AIFConfig, dump_config, parse_config
from .errors import OrderingError, ShapeError

SNAPSHOT_MAGIC = b"AIFS"
SNAPSHOT_VERSION = 1

# attribute fields are kept apart by offsetting their raw values
FIELD_STRIDE = 1_000_003


class EmbeddingTable:
    """Deterministic hashed-bucket embedding lookup."""

    def __init__(self, bucket_count: int, dim: int, seed: int):
        self.bucket_count = int(bucket_count)
        self.dim = int(dim)
        self.seed = int(seed)
        self._matrix = None
        self._lock = threading.Lock()

    def _materialize(self) -> np.ndarray:
        if self._matrix is None:
            with self._lock:
                if self._matrix is None:
                    rng = np.random.default_rng(self.seed)
                    mat = rng.standard_normal((self.bucket_count, self.dim))
                    mat /= np.sqrt(self.dim)
                    self._matrix = mat.astype(np.float32)
        return self._matrix

    def lookup(self, feature_id: int) -> np.ndarray:
        return self._materialize()[int(feature_id) % self.bucket_count][None, :].copy()

    def lookup_many(self, feature_ids) -> np.ndarray:
        ids = np.asarray(feature_ids, dtype=np.int64) % self.bucket_count
        return self._materialize()[ids]


@dataclass(frozen=True, eq=False)
class Behaviors:
    """A behavior sequence as parallel arrays, timestamps nondecreasing."""

    items: np.ndarray
    categories: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def tail(self, n: int) -> "Behaviors":
        return Behaviors(self.items[-n:], self.categories[-n:], self.timestamps[-n:])

    def as_tuples(self):
        return list(zip(self.items.tolist(), self.categories.tolist(), self.timestamps.tolist()))


@dataclass(frozen=True, eq=False)
class UserState:
    user_id: int
    nickname: str
    profile_features: tuple
    behavior_sequence: Behaviors
    long_term_sequence: Behaviors


@dataclass(frozen=True, eq=False)
class ItemRecord:
    item_id: int
    category_id: int
    attribute_features: tuple
    mm_embedding: np.ndarray
    version: int = 0
    bid: float = 1.0


@dataclass(frozen=True, eq=False)
class ItemUpdateEvent:
    item_id: int
    new_attribute_features: tuple
    event_seq: int
    new_mm_embedding: np.ndarray | None = None
    # only needed when the event introduces a new item
    category_id: int | None = None


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return (v / np.linalg.norm(v)).astype(np.float32)


class FeatureStore:
    """Users, items and embedding tables.

    Item records are immutable and replaced by a single reference swap, so a
    concurrent reader sees either the old or the new record. Updates must come
    from a single writer.
    """

    def __init__(self, config: AIFConfig, users: dict, items: dict):
        self.config = config
        self.users = users
        self._items = items
        self.last_event_seq = 0
        self.replay_log: list[ItemUpdateEvent] = []
        self._write_lock = threading.Lock()
        self.tables = make_tables(config)

    # reads -----------------------------------------------------------------
    def get_item(self, item_id: int) -> ItemRecord:
        return self._items[item_id]

    def has_item(self, item_id: int) -> bool:
        return item_id in self._items

    def item_ids(self) -> list[int]:
        return sorted(self._items)

    def items_snapshot(self) -> dict:
        return dict(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def item_embedding(self, record: ItemRecord) -> np.ndarray:
        return item_embeddings(self.tables, [record])

    # writes ----------------------------------------------------------------
    def apply_item_update(self, event: ItemUpdateEvent) -> ItemRecord:
        with self._write_lock:
            if event.event_seq <= self.last_event_seq:
                raise OrderingError(
                    f"event_seq {event.event_seq} not after {self.last_event_seq}"
                )
            old = self._items.get(event.item_id)
            if old is None:
                if event.category_id is None:
                    raise ValueError(f"new item {event.item_id} needs a category_id")
                mm = event.new_mm_embedding
                if mm is None:
                    mm = default_mm_embedding(self.config, event.item_id)
                new = ItemRecord(
                    item_id=event.item_id,
                    category_id=int(event.category_id),
                    attribute_features=tuple(event.new_attribute_features),
                    mm_embedding=unit(mm),
                    version=1,
                    bid=default_bid(self.config, event.item_id),
                )
            else:
                changes = dict(
                    attribute_features=tuple(event.new_attribute_features),
                    version=old.version + 1,
                )
                if event.new_mm_embedding is not None:
                    changes["mm_embedding"] = unit(event.new_mm_embedding)
                if event.category_id is not None:
                    changes["category_id"] = int(event.category_id)
                new = replace(old, **changes)
            self._items[event.item_id] = new
            self.last_event_seq = event.event_seq
            self.replay_log.append(event)
            return new


def make_tables(cfg: AIFConfig) -> dict:
    half = cfg.user_dim // 2
    specs = {
        "profile": cfg.feature_dim,
        "attribute": cfg.feature_dim,
        "seq_item": half,
        "seq_category": cfg.user_dim - half,
    }
    return {
        name: EmbeddingTable(cfg.bucket_count, dim, cfg.seed * 1000 + idx)
        for idx, (name, dim) in enumerate(specs.items())
    }


def materialize_user(state: UserState, tables: dict):
    """Return ``(U_profile 1 x dU, U_seq l x dU)`` for a user."""
    if len(state.profile_features) < 1:
        raise ShapeError("user has no profile features (zero-width profile)")
    prof = tables["profile"].lookup_many(state.profile_features)
    u_profile = np.ascontiguousarray(prof.reshape(1, -1))
    seq = state.behavior_sequence
    u_seq = embed_behaviors(tables, seq.items, seq.categories)
    return u_profile, u_seq


def embed_behaviors(tables: dict, items, categories) -> np.ndarray:
    """Each behavior row is ``[seq_item(item) | seq_category(category)]``."""
    a = tables["seq_item"].lookup_many(items)
    b = tables["seq_category"].lookup_many(categories)
    return np.ascontiguousarray(np.concatenate([a, b], axis=1), dtype=np.float32)


def item_embeddings(tables: dict, records: Iterable[ItemRecord]) -> np.ndarray:
    """Concatenated attribute embeddings, one row per record."""
    records = list(records)
    if not records:
        return np.zeros((0, 0), dtype=np.float32)
    feats = np.asarray([r.attribute_features for r in records], dtype=np.int64)
    emb = tables["attribute"].lookup_many(feats.ravel())
    return np.ascontiguousarray(emb.reshape(len(records), -1), dtype=np.float32)


def attribute_features(item_id: int, category_id: int, n_fields: int, variant: int = 0) -> tuple:
    raw = [item_id, category_id, (item_id * 31 + variant) % 257, (item_id + 7 * variant) % 50]
    raw += [(item_id * (k + 3) + variant) % 997 for k in range(4, n_fields)]
    return tuple(k * FIELD_STRIDE + v for k, v in enumerate(raw[:n_fields]))


def default_mm_embedding(cfg: AIFConfig, item_id: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 17, int(item_id)])
    return unit(rng.standard_normal(cfg.mm_dim))


def default_bid(cfg: AIFConfig, item_id: int) -> float:
    rng = np.random.default_rng([cfg.seed, 29, int(item_id)])
    return float(np.float32(0.5 + rng.random()))


def build_store(cfg: AIFConfig) -> FeatureStore:
    rng = np.random.default_rng([cfg.seed, 1])
    categories = np.arange(cfg.num_items) % cfg.num_categories
    rng.shuffle(categories)
    mm = rng.standard_normal((cfg.num_items, cfg.mm_dim))
    mm /= np.linalg.norm(mm, axis=1, keepdims=True)
    items = {}
    for item_id in range(cfg.num_items):
        cat = int(categories[item_id])
        items[item_id] = ItemRecord(
            item_id=item_id,
            category_id=cat,
            attribute_features=attribute_features(item_id, cat, cfg.attribute_features),
            mm_embedding=mm[item_id].astype(np.float32),
            version=0,
            bid=default_bid(cfg, item_id),
        )
    by_category = [np.flatnonzero(categories == c) for c in range(cfg.num_categories)]
    users = {uid: _make_user(cfg, uid, by_category) for uid in range(cfg.num_users)}
    return FeatureStore(cfg, users, items)


def _make_user(cfg: AIFConfig, user_id: int, by_category) -> UserState:
    rng = np.random.default_rng([cfg.seed, 2, user_id])
    n_cats = int(rng.integers(cfg.min_user_categories, cfg.max_user_categories + 1))
    cats = rng.choice(cfg.num_categories, size=n_cats, replace=False)
    weights = rng.dirichlet(np.ones(n_cats))
    picked = rng.choice(cats, size=cfg.long_seq_len, p=weights)
    item_ids = np.array(
        [by_category[c][rng.integers(len(by_category[c]))] for c in picked], dtype=np.int64
    )
    timestamps = np.cumsum(rng.integers(1, 600, size=cfg.long_seq_len)).astype(np.int64)
    long_term = Behaviors(item_ids, picked.astype(np.int64), timestamps)
    profile = tuple(
        int(k * FIELD_STRIDE + rng.integers(1000)) for k in range(cfg.profile_features)
    )
    return UserState(
        user_id=user_id,
        nickname=f"user{user_id:05d}",
        profile_features=profile,
        behavior_sequence=long_term.tail(cfg.seq_len),
        long_term_sequence=long_term,
    )


def random_update_events(store: FeatureStore, count: int, seed: int,
                         new_item_fraction: float = 0.1, mm_fraction: float = 0.5):
    """Random update events continuing the store's event sequence (not applied)."""
    cfg = store.config
    rng = np.random.default_rng([seed, 3])
    seq = store.last_event_seq
    next_new = max(store.item_ids(), default=-1) + 1
    events = []
    for _ in range(count):
        seq += 1
        mm = None
        if rng.random() < new_item_fraction:
            item_id, cat = next_new, int(rng.integers(cfg.num_categories))
            next_new += 1
            mm = rng.standard_normal(cfg.mm_dim)
        else:
            item_id = int(rng.integers(cfg.num_items))
            cat = None
            if rng.random() < mm_fraction:
                mm = rng.standard_normal(cfg.mm_dim)
        base_cat = cat if cat is not None else store.get_item(item_id).category_id
        feats = attribute_features(item_id, base_cat, cfg.attribute_features, variant=seq)
        events.append(ItemUpdateEvent(item_id, feats, seq, mm, cat))
    return events


# snapshot I/O ---------------------------------------------------------------

def _write_seq(buf, seq: Behaviors):
    buf.write(struct.pack("<I", len(seq)))
    rows = np.empty(len(seq), dtype=[("i", "<u8"), ("c", "<u8"), ("t", "<i8")])
    rows["i"], rows["c"], rows["t"] = seq.items, seq.categories, seq.timestamps
    buf.write(rows.tobytes())


def _write_u64s(buf, values):
    values = list(values)
    buf.write(struct.pack("<I", len(values)))
    buf.write(np.asarray(values, dtype="<u8").tobytes())


def _write_f32s(buf, values):
    arr = np.asarray(values if values is not None else [], dtype="<f4").ravel()
    buf.write(struct.pack("<I", arr.size))
    buf.write(arr.tobytes())


def save_snapshot(store: FeatureStore, path) -> None:
    buf = io.BytesIO()
    cfg_text = dump_config(store.config).encode("utf-8")
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<II", SNAPSHOT_VERSION, len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<Q", store.last_event_seq))
    items = store.items_snapshot()
    buf.write(struct.pack("<I", len(items)))
    for item_id in sorted(items):
        rec = items[item_id]
        buf.write(struct.pack("<QQQf", rec.item_id, rec.category_id, rec.version, rec.bid))
        _write_u64s(buf, rec.attribute_features)
        _write_f32s(buf, rec.mm_embedding)
    buf.write(struct.pack("<I", len(store.users)))
    for user_id in sorted(store.users):
        user = store.users[user_id]
        nick = user.nickname.encode("utf-8")
        buf.write(struct.pack("<QI", user.user_id, len(nick)))
        buf.write(nick)
        _write_u64s(buf, user.profile_features)
        _write_seq(buf, user.behavior_sequence)
        _write_seq(buf, user.long_term_sequence)
    buf.write(struct.pack("<I", len(store.replay_log)))
    for ev in store.replay_log:
        cat = -1 if ev.category_id is None else ev.category_id
        buf.write(struct.pack("<Qqq", ev.event_seq, ev.item_id, cat))
        _write_u64s(buf, ev.new_attribute_features)
        _write_f32s(buf, ev.new_mm_embedding)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValueError(f"truncated snapshot at byte {self.pos}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated snapshot at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.raw(dt.itemsize * count), dtype=dt)

    def u64s(self) -> tuple:
        (n,) = self.take("<I")
        return tuple(int(v) for v in self.array("<u8", n))

    def f32s(self) -> np.ndarray:
        (n,) = self.take("<I")
        return self.array("<f4", n).astype(np.float32)

    def seq(self) -> Behaviors:
        (n,) = self.take("<I")
        rows = self.array([("i", "<u8"), ("c", "<u8"), ("t", "<i8")], n)
        return Behaviors(
            rows["i"].astype(np.int64), rows["c"].astype(np.int64), rows["t"].astype(np.int64)
        )


def load_snapshot(path) -> FeatureStore:
    r = _Reader(Path(path).read_bytes())
    if r.raw(4) != SNAPSHOT_MAGIC:
        raise ValueError("not a store snapshot (bad magic)")
    version, cfg_len = r.take("<II")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    cfg = parse_config(r.raw(cfg_len).decode("utf-8"))
    (last_seq,) = r.take("<Q")
    items = {}
    (n_items,) = r.take("<I")
    for _ in range(n_items):
        item_id, cat, version, bid = r.take("<QQQf")
        feats = r.u64s()
        mm = r.f32s()
        items[item_id] = ItemRecord(item_id, cat, feats, mm, version, float(bid))
    users = {}
    (n_users,) = r.take("<I")
    for _ in range(n_users):
        user_id, nick_len = r.take("<QI")
        nick = r.raw(nick_len).decode("utf-8")
        profile = r.u64s()
        short, long_term = r.seq(), r.seq()
        users[user_id] = UserState(user_id, nick, profile, short, long_term)
    events = []
    (n_events,) = r.take("<I")
    for _ in range(n_events):
        seq, item_id, cat = r.take("<Qqq")
        feats = r.u64s()
        mm = r.f32s()
        events.append(
            ItemUpdateEvent(item_id, feats, seq, mm if mm.size else None, None if cat < 0 else cat)
        )
    store = FeatureStore(cfg, users, items)
    store.last_event_seq = last_seq
    store.replay_log = events
    return store
