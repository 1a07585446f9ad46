"""Pre-caching of per-(user, category) long-term behavior subsequences.

Long-term sequences are partitioned offline by category. While retrieval
runs, every subsequence of the requesting user is parsed into an LRU cache;
pre-ranking then reads subsequences for candidate categories straight from
the cache. Parsing is charged in virtual time as
``parse_base_ms + parse_per_event_ms * length``.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import StageCostConfig

EMPTY = np.zeros(0, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Subsequence:
    items: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


EMPTY_SUBSEQUENCE = Subsequence(EMPTY, EMPTY)


class SimHardStore:
    """``(user_id, category_id) -> Subsequence`` partition of long-term histories."""

    def __init__(self, table: dict):
        self.table = table
        self._by_user: dict = {}
        for user_id, cat in table:
            self._by_user.setdefault(user_id, []).append(cat)
        for cats in self._by_user.values():
            cats.sort()

    def get(self, user_id, category_id):
        return self.table.get((user_id, category_id))

    def categories(self, user_id) -> list:
        return list(self._by_user.get(user_id, ()))

    def __len__(self) -> int:
        return len(self.table)


def build_sim_store(users) -> SimHardStore:
    users = users.values() if isinstance(users, dict) else users
    table = {}
    for user in users:
        seq = user.long_term_sequence
        if not len(seq):
            continue
        # stable sort keeps each category's events in timestamp order
        order = np.argsort(seq.categories, kind="stable")
        cats = seq.categories[order]
        bounds = np.flatnonzero(np.diff(cats)) + 1
        for chunk in np.split(order, bounds):
            cat = int(seq.categories[chunk[0]])
            table[(user.user_id, cat)] = Subsequence(
                seq.items[chunk].copy(), seq.timestamps[chunk].copy()
            )
    return SimHardStore(table)


class LruCache:
    """Bounded LRU map with per-key single-flight loading.

    Recency is refreshed on hits and inserts. With ``record_trace`` set,
    every hit, miss, insert and eviction is appended to ``trace`` as
    ``(event, key)``.
    """

    def __init__(self, capacity: int, record_trace: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self._inflight: dict = {}
        self.hits = self.misses = self.evictions = self.inserts = 0
        self.trace = [] if record_trace else None

    def _log(self, event, key):
        if self.trace is not None:
            self.trace.append((event, key))

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key) -> bool:
        return key in self._data

    def keys(self) -> list:
        """Keys from least to most recently used."""
        with self._lock:
            return list(self._data)

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                self._log("hit", key)
                return self._data[key]
            self.misses += 1
            self._log("miss", key)
            return None

    def put(self, key, value) -> None:
        with self._lock:
            self._put_locked(key, value)

    def _put_locked(self, key, value):
        if key in self._data:
            self._data.move_to_end(key)
        self._data[key] = value
        self.inserts += 1
        self._log("insert", key)
        while len(self._data) > self.capacity:
            old, _ = self._data.popitem(last=False)
            self.evictions += 1
            self._log("evict", old)

    def touch(self, key) -> bool:
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return True
            return False

    def get_or_load(self, key, loader):
        """Return ``(value, hit)``; concurrent misses on one key load once."""
        value = self.get(key)
        if value is not None:
            return value, True
        with self._lock:
            flight = self._inflight.setdefault(key, threading.Lock())
        with flight:
            with self._lock:
                if key in self._data:
                    self._data.move_to_end(key)
                    return self._data[key], True
            value = loader()
            with self._lock:
                if value is not None:
                    self._put_locked(key, value)
                self._inflight.pop(key, None)
            return value, False

    def metrics(self) -> dict:
        return dict(
            sim_cache_hits=self.hits,
            sim_cache_misses=self.misses,
            sim_cache_evictions=self.evictions,
            sim_cache_inserts=self.inserts,
        )


class PrefetchResult(NamedTuple):
    inserted: int
    delay_ms: float


class LookupResult(NamedTuple):
    subsequence: Subsequence
    hit: bool
    delay_ms: float


def prefetch_user(cache: LruCache, store: SimHardStore, user_id,
                  costs: StageCostConfig | None = None) -> PrefetchResult:
    """Parse every subsequence of ``user_id`` into the cache.

    Already-cached pairs are only refreshed and cost nothing; ``inserted``
    counts newly parsed pairs.
    """
    costs = costs or StageCostConfig()
    inserted, delay = 0, 0.0
    for cat in store.categories(user_id):
        key = (user_id, cat)
        if cache.touch(key):
            continue
        sub = store.get(user_id, cat)
        delay += costs.parse_cost(len(sub))
        cache.put(key, sub)
        inserted += 1
    return PrefetchResult(inserted, delay)


def lookup_subsequence(cache: LruCache | None, store: SimHardStore, user_id, category_id,
                       costs: StageCostConfig | None = None) -> LookupResult:
    """Subsequence for one pair; ``cache=None`` reads and parses the store directly.

    Pairs absent from the store return an empty subsequence with no delay and
    are never inserted.
    """
    costs = costs or StageCostConfig()
    if store.get(user_id, category_id) is None:
        return LookupResult(EMPTY_SUBSEQUENCE, False, 0.0)
    if cache is None:
        sub = store.get(user_id, category_id)
        return LookupResult(sub, False, costs.parse_cost(len(sub)))
    sub, hit = cache.get_or_load((user_id, category_id), lambda: store.get(user_id, category_id))
    return LookupResult(sub, hit, 0.0 if hit else costs.parse_cost(len(sub)))
