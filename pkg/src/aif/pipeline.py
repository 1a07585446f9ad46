"""The Merger: sequential and asynchronous pre-ranking pipelines.

Both pipelines compute the same model. The sequential one does everything
after retrieval, once per mini-batch: user features are fetched and the
user network is run again for every batch, item vectors are computed
inline, and long-term subsequences are parsed from the store. The
asynchronous one runs the user network once while retrieval is in flight,
reads item vectors from the nearline table, and reads pre-cached
subsequences.

Latency is charged in virtual milliseconds from :class:`StageCostConfig`.
Fetch and forward delays are per mini-batch. For the sequential pipeline
the request latency is the sum of all charged stages. For the asynchronous
pipeline it is ``max(retrieval, user path) + pre-ranking path`` where the
user path is user fetch + user forward + subsequence prefetch, and the
pre-ranking path is, per batch, item fetch + pre-rank forward + parse time
for cache misses + item forward when the nearline table missed an item.

Score-head input, in this order (widths with default config)::

    u_self (d) | u_profile_attn (d) | nearline item vector (d) | bridged
    user vector (d') | LSH-DIN (d) | SimTier histogram (N) | raw item embedding (dI)

The LSH-DIN and SimTier blocks are divided by the subsequence length before
entering the head so their scale does not grow with history length.
"""
from __future__ import annotations

import math
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .bea import bea_item_phase, bea_serve
from .config import AIFConfig
from .core import as_matrix, mlp_forward
from .errors import ConsistencyError, N2OMissError, ShapeError
from .features import build_store, embed_behaviors, item_embeddings
from .lsh import (
    HashPlane,
    build_signature_table,
    lsh_din,
    signature_update,
    signatures,
    similarity_matrix,
    simtier,
)
from .model import init_model
from .n2o import NearlineEngine, lookup, reduce_item
from .precache import LruCache, build_sim_store, lookup_subsequence, prefetch_user
from .user_engine import AsyncUserVector, CacheKey, UserAsyncEngine, user_vectors

STAGES = (
    "retrieval",
    "user_fetch",
    "user_forward",
    "item_fetch",
    "item_forward",
    "cross_parse",
    "prerank_forward",
)


@dataclass(frozen=True)
class Request:
    request_id: str
    user_id: int
    arrival_ms: float
    candidate_seed: int


@dataclass(frozen=True)
class ScoredCandidate:
    item_id: int
    score: float
    bid: float


@dataclass
class LatencyBreakdown:
    stages: dict = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    total_ms: float = 0.0
    user_path_ms: float = 0.0
    prerank_path_ms: float = 0.0
    batches: int = 0


@dataclass(frozen=True, eq=False)
class ItemInputs:
    item_ids: np.ndarray
    vectors: np.ndarray  # b x d
    bea_weights: np.ndarray  # b x n
    raw: np.ndarray  # b x dI
    model_version: int


class Counters:
    def __init__(self):
        self._lock = threading.Lock()
        self._c = Counter()

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._c[name] += n

    def __getitem__(self, name: str) -> int:
        return self._c[name]

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._c)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(np.float32)


def prerank_score(user: AsyncUserVector, items: ItemInputs, behavior, head) -> np.ndarray:
    """Scores in (0, 1) for each candidate row."""
    if user.model_version != items.model_version:
        raise ConsistencyError(
            f"user vector from model {user.model_version}, items from {items.model_version}"
        )
    din, hist = behavior
    b = len(items.item_ids)
    for name, arr in (("vectors", items.vectors), ("bea_weights", items.bea_weights),
                      ("raw", items.raw), ("din", din), ("hist", hist)):
        if arr.shape[0] != b:
            raise ShapeError(f"{name} has {arr.shape[0]} rows for {b} candidates")
    v_hat = bea_serve(items.bea_weights, user.bea_vectors)
    x = np.concatenate(
        [np.repeat(user.combined, b, axis=0), items.vectors, v_hat, din, hist, items.raw],
        axis=1,
    )
    return _sigmoid(mlp_forward(as_matrix(x), head)).reshape(-1)


def ranking(item_ids, scores) -> np.ndarray:
    """Item ids by descending score, ties broken by ascending id."""
    item_ids = np.asarray(item_ids)
    return item_ids[np.lexsort((item_ids, -np.asarray(scores, dtype=np.float64)))]


class Merger:
    """Holds the serving state and runs either pipeline over a request."""

    def __init__(self, cfg: AIFConfig | None = None, store=None, model=None):
        self.cfg = cfg = cfg or AIFConfig()
        self.store = store if store is not None else build_store(cfg)
        self.model = model if model is not None else init_model(cfg)
        self.plane = HashPlane.create(cfg.lsh_bits, cfg.mm_dim, cfg.lsh_seed)
        self.signatures = build_signature_table(self.store, self.plane)
        self.sim_store = build_sim_store(self.store.users)
        self.nearline = NearlineEngine(self.store, self.model)
        self.user_engine = UserAsyncEngine(self.store.tables, self.model, cfg.user_cache_capacity)
        self.sim_cache = LruCache(cfg.sim_capacity)
        self.seq_counters = Counters()
        self.aif_counters = Counters()
        self.pending_events = []

    # shared pieces --------------------------------------------------------------
    def retrieval_stub(self, request: Request) -> np.ndarray:
        ids = np.asarray(self.store.item_ids(), dtype=np.int64)
        rng = np.random.default_rng(request.candidate_seed)
        return rng.choice(ids, size=min(self.cfg.candidates, len(ids)), replace=False)

    def batches(self, candidates):
        size = self.cfg.costs.mini_batch_size
        return [candidates[i : i + size] for i in range(0, len(candidates), size)]

    def behavior_features(self, user_id, item_ids, item_sigs, subsequence_for):
        """LSH-DIN and SimTier blocks; ``subsequence_for(cat)`` returns (sub, delay)."""
        cfg = self.cfg
        b = len(item_ids)
        din = np.zeros((b, cfg.d), dtype=np.float32)
        hist = np.zeros((b, cfg.tiers), dtype=np.float32)
        cats = np.fromiter((self.store.get_item(int(i)).category_id for i in item_ids),
                           dtype=np.int64, count=b)
        delay = 0.0
        for cat in np.unique(cats):
            rows = np.flatnonzero(cats == cat)
            sub, cost = subsequence_for(int(cat))
            delay += cost
            if not len(sub):
                continue
            seq_sigs = self._sequence_signatures(sub.items)
            sims = similarity_matrix(item_sigs[rows], seq_sigs)
            history = embed_behaviors(self.store.tables, sub.items, np.full(len(sub), cat))
            scale = np.float32(len(sub))
            din[rows] = lsh_din(history, sims, self.model.w_seq) / scale
            hist[rows] = simtier(sims, cfg.tiers).astype(np.float32) / scale
        return (din, hist), delay

    def _sequence_signatures(self, item_ids):
        known = [int(i) in self.signatures for i in item_ids]
        if all(known):
            return self.signatures.rows(item_ids)
        mm = np.stack([self.store.get_item(int(i)).mm_embedding for i in item_ids])
        return signatures(mm, self.plane)

    def _user_vector(self, user, request_id, created_at):
        u_self, u_prof, V = user_vectors(user, self.store.tables, self.model)
        key = CacheKey(str(request_id), user.nickname)
        return AsyncUserVector(key, u_self, u_prof, V, created_at, self.model.model_version)

    # sequential -------------------------------------------------------------------
    def run_sequential(self, request: Request):
        cfg, costs = self.cfg, self.cfg.costs
        user = self.store.users[request.user_id]
        lat = LatencyBreakdown()
        lat.stages["retrieval"] = costs.retrieval_ms
        candidates = self.retrieval_stub(request)
        scored = []
        for batch in self.batches(candidates):
            lat.batches += 1
            uvec = self._user_vector(user, request.request_id, request.arrival_ms)
            self.seq_counters.add("user_forward")
            records = [self.store.get_item(int(i)) for i in batch]
            raw = item_embeddings(self.store.tables, records)
            vec = reduce_item(raw, self.model.item_mlp)
            weights = bea_item_phase(self.model.bridges, vec)
            self.seq_counters.add("item_forward", len(batch))
            item_sigs = signatures(np.stack([r.mm_embedding for r in records]), self.plane)

            def parse(cat):
                res = lookup_subsequence(None, self.sim_store, user.user_id, cat, costs)
                return res.subsequence, res.delay_ms

            behavior, parse_ms = self.behavior_features(user.user_id, batch, item_sigs, parse)
            items = ItemInputs(batch, vec, weights, raw, self.model.model_version)
            scores = prerank_score(uvec, items, behavior, self.model.head)
            scored += [ScoredCandidate(int(i), float(s), r.bid)
                       for i, s, r in zip(batch, scores, records)]
            for stage, ms in (("user_fetch", costs.user_fetch_ms),
                              ("user_forward", costs.user_forward_ms),
                              ("item_fetch", costs.item_fetch_ms),
                              ("item_forward", costs.item_forward_ms),
                              ("cross_parse", parse_ms),
                              ("prerank_forward", costs.prerank_forward_ms)):
                lat.stages[stage] += ms
        lat.total_ms = sum(lat.stages.values())
        lat.prerank_path_ms = lat.total_ms - costs.retrieval_ms
        self.seq_counters.add("requests")
        return scored, lat

    # asynchronous -----------------------------------------------------------------
    def _user_path(self, user, request, precache):
        costs = self.cfg.costs
        key = CacheKey(str(request.request_id), user.nickname)
        before = self.user_engine.recomputes
        uvec = self.user_engine.compute_and_cache(user, request.request_id, request.arrival_ms)
        computed = self.user_engine.recomputes != before or self.user_engine.get(key) is not uvec
        if computed:
            self.aif_counters.add("user_forward")
        prefetch_ms = 0.0
        if precache:
            res = prefetch_user(self.sim_cache, self.sim_store, user.user_id, costs)
            prefetch_ms = res.delay_ms
            self.aif_counters.add("prefetch_inserts", res.inserted)
        forward_ms = costs.user_forward_ms if computed else 0.0
        return uvec, forward_ms, prefetch_ms

    def _items_from_table(self, table, batch):
        try:
            vec, weights = lookup(table, batch)
            missing = []
        except N2OMissError as exc:
            missing = exc.missing
            present = [i for i in batch if int(i) in table]
            vec = np.zeros((len(batch), table.d), dtype=np.float32)
            weights = np.zeros((len(batch), table.n), dtype=np.float32)
            pos = {int(i): k for k, i in enumerate(batch)}
            if present:
                pv, pw = lookup(table, present)
                rows = [pos[int(i)] for i in present]
                vec[rows], weights[rows] = pv, pw
            recs = [self.store.get_item(int(i)) for i in missing]
            mv = reduce_item(item_embeddings(self.store.tables, recs), self.model.item_mlp)
            rows = [pos[int(i)] for i in missing]
            vec[rows], weights[rows] = mv, bea_item_phase(self.model.bridges, mv)
            self.aif_counters.add("n2o_misses", len(missing))
            self.aif_counters.add("item_forward", len(missing))
        stale = sum(
            1 for i in batch
            if int(i) in table
            and table.entry(int(i))[2] != self.store.get_item(int(i)).version
        )
        if stale:
            self.aif_counters.add("stale_item_reads", stale)
        return vec, weights, bool(missing)

    def _candidate_signatures(self, batch, records):
        if all(int(i) in self.signatures for i in batch):
            return self.signatures.rows(batch)
        return signatures(np.stack([r.mm_embedding for r in records]), self.plane)

    def run_aif(self, request: Request, precache: bool | None = None, executor=None):
        cfg, costs = self.cfg, self.cfg.costs
        precache = cfg.precache if precache is None else precache
        user = self.store.users[request.user_id]
        lat = LatencyBreakdown()
        if executor is not None:
            user_future = executor.submit(self._user_path, user, request, precache)
            candidates = self.retrieval_stub(request)
            uvec, forward_ms, prefetch_ms = user_future.result()
        else:
            uvec, forward_ms, prefetch_ms = self._user_path(user, request, precache)
            candidates = self.retrieval_stub(request)
        lat.stages["retrieval"] = costs.retrieval_ms
        lat.stages["user_fetch"] = costs.user_fetch_ms
        lat.stages["user_forward"] = forward_ms
        lat.stages["cross_parse"] = prefetch_ms
        lat.user_path_ms = costs.user_fetch_ms + forward_ms + prefetch_ms
        table = self.nearline.table
        cache = self.sim_cache if precache else None

        def score_batch(batch):
            records = [self.store.get_item(int(i)) for i in batch]
            vec, weights, missed = self._items_from_table(table, batch)
            raw = item_embeddings(self.store.tables, records)
            item_sigs = self._candidate_signatures(batch, records)

            def parse(cat):
                res = lookup_subsequence(cache, self.sim_store, user.user_id, cat, costs)
                if cache is not None and len(res.subsequence):
                    self.aif_counters.add("sim_hits" if res.hit else "sim_misses")
                return res.subsequence, res.delay_ms

            behavior, parse_ms = self.behavior_features(user.user_id, batch, item_sigs, parse)
            items = ItemInputs(batch, vec, weights, raw, table.model_version)
            scores = prerank_score(uvec, items, behavior, self.model.head)
            out = [ScoredCandidate(int(i), float(s), r.bid) for i, s, r in zip(batch, scores, records)]
            return out, parse_ms, missed

        batches = self.batches(candidates)
        results = list(executor.map(score_batch, batches)) if executor else map(score_batch, batches)
        scored = []
        for out, parse_ms, missed in results:
            lat.batches += 1
            scored += out
            lat.stages["item_fetch"] += costs.item_fetch_ms
            lat.stages["prerank_forward"] += costs.prerank_forward_ms
            lat.stages["cross_parse"] += parse_ms
            miss_ms = costs.item_forward_ms if missed else 0.0
            lat.stages["item_forward"] += miss_ms
            lat.prerank_path_ms += costs.item_fetch_ms + costs.prerank_forward_ms + parse_ms + miss_ms
        lat.total_ms = max(costs.retrieval_ms, lat.user_path_ms) + lat.prerank_path_ms
        self.aif_counters.add("requests")
        return scored, lat

    # updates ----------------------------------------------------------------------
    def apply_updates(self, events) -> None:
        """Apply events to the feature store; nearline artifacts lag until :meth:`drain`."""
        for ev in events:
            self.store.apply_item_update(ev)
            self.pending_events.append(ev)

    def drain(self) -> int:
        """Propagate pending events to the nearline table and signature table."""
        events, self.pending_events = self.pending_events, []
        if not events:
            return 0
        before = self.nearline.incremental_items
        self.nearline.on_events(events)
        self.aif_counters.add("item_forward", self.nearline.incremental_items - before)
        for ev in events:
            self.signatures = signature_update(self.signatures, ev, self.plane)
        return len(events)

    def update_model(self, model) -> None:
        self.model = model
        self.user_engine = UserAsyncEngine(self.store.tables, model, self.cfg.user_cache_capacity)
        self.nearline.on_model_update(model)

    def counters(self) -> dict:
        out = {f"sequential_{k}": v for k, v in self.seq_counters.snapshot().items()}
        out.update({f"aif_{k}": v for k, v in self.aif_counters.snapshot().items()})
        out.update(self.user_engine.metrics())
        out.update(self.sim_cache.metrics())
        return out


# equivalence ------------------------------------------------------------------------

@dataclass
class EquivalenceRow:
    request_id: str
    max_abs_diff: float
    rank_agreement: float
    stale: bool = False
    drained_diff: float = 0.0


@dataclass
class EquivalenceReport:
    rows: list
    tolerance: float

    @property
    def strict_rows(self):
        return [r for r in self.rows if not r.stale]

    @property
    def passed(self) -> bool:
        strict_ok = all(
            r.max_abs_diff <= self.tolerance and r.rank_agreement == 1.0 for r in self.strict_rows
        )
        drained_ok = all(r.drained_diff <= self.tolerance for r in self.rows if r.stale)
        return strict_ok and drained_ok

    @property
    def max_abs_diff(self) -> float:
        return max((r.max_abs_diff for r in self.strict_rows), default=0.0)

    def to_csv(self) -> str:
        lines = ["request_id,max_abs_diff,rank_agreement,stale,drained_diff"]
        for r in self.rows:
            lines.append(
                f"{r.request_id},{r.max_abs_diff!r},{r.rank_agreement!r},{int(r.stale)},{r.drained_diff!r}"
            )
        return "\n".join(lines) + "\n"


def _compare(seq, aif):
    seq_ids = np.array([c.item_id for c in seq])
    aif_ids = np.array([c.item_id for c in aif])
    if not np.array_equal(seq_ids, aif_ids):
        raise ConsistencyError("pipelines scored different candidate lists")
    s = np.array([c.score for c in seq], dtype=np.float64)
    a = np.array([c.score for c in aif], dtype=np.float64)
    diff = float(np.max(np.abs(s - a))) if len(s) else 0.0
    agree = float(np.mean(ranking(seq_ids, s) == ranking(aif_ids, a))) if len(s) else 1.0
    return diff, agree


def equivalence_check(merger: Merger, trace, updates: dict | None = None,
                      tolerance: float = 1e-6) -> EquivalenceReport:
    """Score every request with both pipelines and compare.

    ``updates`` maps a trace index to events applied to the store just
    before that request. Those requests see a stale nearline table, so they
    are reported with their staleness delta and re-scored after draining
    the updates instead of being held to the strict tolerance.
    """
    updates = updates or {}
    rows = []
    for idx, req in enumerate(trace):
        stale = idx in updates
        if stale:
            merger.apply_updates(updates[idx])
        seq, _ = merger.run_sequential(req)
        aif, _ = merger.run_aif(req)
        diff, agree = _compare(seq, aif)
        row = EquivalenceRow(req.request_id, diff, agree, stale)
        if stale:
            merger.drain()
            retry = Request(f"{req.request_id}#drained", req.user_id, req.arrival_ms, req.candidate_seed)
            aif2, _ = merger.run_aif(retry)
            row.drained_diff, _ = _compare(seq, aif2)
        rows.append(row)
    return EquivalenceReport(rows, tolerance)


def closed_form_latency(cfg: AIFConfig, batches: int, parse_ms: float, pipeline: str,
                        prefetch_ms: float = 0.0, user_forward: bool = True,
                        miss_batches: int = 0) -> float:
    """Request latency from the stage config alone (used as a test oracle)."""
    c = cfg.costs
    if pipeline == "sequential":
        per_batch = (c.user_fetch_ms + c.user_forward_ms + c.item_fetch_ms
                     + c.item_forward_ms + c.prerank_forward_ms)
        return c.retrieval_ms + batches * per_batch + parse_ms
    user_path = c.user_fetch_ms + (c.user_forward_ms if user_forward else 0.0) + prefetch_ms
    prerank = batches * (c.item_fetch_ms + c.prerank_forward_ms) + parse_ms + miss_batches * c.item_forward_ms
    return max(c.retrieval_ms, user_path) + prerank


def num_batches(cfg: AIFConfig, candidates: int) -> int:
    return math.ceil(candidates / cfg.costs.mini_batch_size)
