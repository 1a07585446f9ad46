"""Nearline item-side inference and the N2O index table.

Each item's concatenated attribute embedding is reduced by an MLP to a
``d``-wide vector, and its bridge weights are computed from that vector.
Tables are immutable; a new table is published by swapping one reference,
so readers always see a single epoch.

Index file (little-endian)::

    b"N2O1"  u32 format_version (=1)  u32 d  u32 n  u64 count
    count * (u64 item_id, u64 version, d * f32 vector, n * f32 bea_weights)
"""
from __future__ import annotations

import struct
import threading
from pathlib import Path

import numpy as np

from .bea import bea_item_phase
from .core import as_matrix, mlp_forward
from .errors import N2OMissError
from .features import FeatureStore, item_embeddings

N2O_MAGIC = b"N2O1"
N2O_FORMAT_VERSION = 1


def reduce_item(I, layers) -> np.ndarray:
    return mlp_forward(as_matrix(I, "I"), layers)


def item_forward(records, tables, model):
    """Reduced vectors and bridge weights for a batch of item records."""
    emb = item_embeddings(tables, records)
    vec = reduce_item(emb, model.item_mlp)
    return vec, bea_item_phase(model.bridges, vec)


class N2OIndexTable:
    """Precomputed item vectors, bridge weights and source versions."""

    def __init__(self, ids, vectors, weights, versions, table_epoch=0, model_version=0):
        self.ids = [int(i) for i in ids]
        self.index = {item_id: row for row, item_id in enumerate(self.ids)}
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.weights = np.ascontiguousarray(weights, dtype=np.float32)
        self.versions = np.asarray(versions, dtype=np.int64)
        for arr in (self.vectors, self.weights, self.versions):
            arr.setflags(write=False)
        self.table_epoch = table_epoch
        self.model_version = model_version

    @classmethod
    def empty(cls, d: int, n: int, table_epoch=0, model_version=0):
        return cls([], np.zeros((0, d)), np.zeros((0, n)), [], table_epoch, model_version)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def n(self) -> int:
        return self.weights.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id) -> bool:
        return item_id in self.index

    def entry(self, item_id: int):
        row = self.index[item_id]
        return self.vectors[row], self.weights[row], int(self.versions[row])

    def same_entries(self, other: "N2OIndexTable") -> bool:
        """Bit-exact comparison of entries, ignoring epoch and row order."""
        if set(self.index) != set(other.index):
            return False
        mine = [self.index[i] for i in self.ids]
        theirs = [other.index[i] for i in self.ids]
        return (
            np.array_equal(self.vectors[mine].view(np.uint32), other.vectors[theirs].view(np.uint32))
            and np.array_equal(self.weights[mine].view(np.uint32), other.weights[theirs].view(np.uint32))
            and np.array_equal(self.versions[mine], other.versions[theirs])
        )


def rebuild_full(store: FeatureStore, model, previous: N2OIndexTable | None = None) -> N2OIndexTable:
    """One entry per store item, epoch one past ``previous``."""
    epoch = 0 if previous is None else previous.table_epoch + 1
    ids = store.item_ids()
    if not ids:
        return N2OIndexTable.empty(model.d, model.n_bridges, epoch, model.model_version)
    records = [store.get_item(i) for i in ids]
    vec, w = item_forward(records, store.tables, model)
    return N2OIndexTable(ids, vec, w, [r.version for r in records], epoch, model.model_version)


def apply_incremental(table: N2OIndexTable, events, store: FeatureStore, model) -> N2OIndexTable:
    """Recompute only the items the events touch, from the current store."""
    touched = list(dict.fromkeys(int(ev.item_id) for ev in events))
    if not touched:
        return table
    records = [store.get_item(i) for i in touched]
    vec, w = item_forward(records, store.tables, model)
    ids = list(table.ids)
    vectors = table.vectors.copy()
    weights = table.weights.copy()
    versions = table.versions.copy()
    extra = []
    for k, rec in enumerate(records):
        row = table.index.get(rec.item_id)
        if row is None:
            extra.append(k)
            continue
        vectors[row], weights[row], versions[row] = vec[k], w[k], rec.version
    if extra:
        ids += [records[k].item_id for k in extra]
        vectors = np.vstack([vectors, vec[extra]])
        weights = np.vstack([weights, w[extra]])
        versions = np.concatenate([versions, [records[k].version for k in extra]])
    return N2OIndexTable(ids, vectors, weights, versions, table.table_epoch + 1, table.model_version)


def lookup(table: N2OIndexTable, item_ids):
    """Rows for ``item_ids`` in request order: ``(vectors b x d, weights b x n)``."""
    rows = [table.index.get(int(i)) for i in item_ids]
    missing = [i for i, r in zip(item_ids, rows) if r is None]
    if missing:
        raise N2OMissError(missing)
    idx = np.asarray(rows, dtype=np.int64)
    return table.vectors[idx], table.weights[idx]


class NearlineEngine:
    """Owns the published table and applies the update-trigger policy.

    A model version change triggers a full rebuild; feature update events
    trigger an incremental recompute of the touched items.
    """

    def __init__(self, store: FeatureStore, model):
        self.store = store
        self.model = model
        self._publish_lock = threading.Lock()
        self.full_rebuild_items = 0
        self.incremental_items = 0
        self._table = None
        self.rebuild()

    @property
    def table(self) -> N2OIndexTable:
        return self._table

    def rebuild(self) -> N2OIndexTable:
        with self._publish_lock:
            table = rebuild_full(self.store, self.model, self._table)
            self.full_rebuild_items += len(table)
            self._table = table
            return table

    def on_model_update(self, model) -> N2OIndexTable:
        if model.model_version == self.model.model_version:
            return self._table
        self.model = model
        return self.rebuild()

    def on_events(self, events) -> N2OIndexTable:
        events = list(events)
        with self._publish_lock:
            table = apply_incremental(self._table, events, self.store, self.model)
            if table is not self._table:
                self.incremental_items += len({ev.item_id for ev in events})
                self._table = table
            return table

    def stale_items(self) -> list[int]:
        """Items whose table version lags the store (or that are absent)."""
        table = self._table
        out = []
        for item_id in self.store.item_ids():
            row = table.index.get(item_id)
            if row is None or table.versions[row] != self.store.get_item(item_id).version:
                out.append(item_id)
        return out


def save_table(table: N2OIndexTable, path) -> None:
    rec = np.dtype([("id", "<u8"), ("ver", "<u8"), ("vec", "<f4", (table.d,)), ("w", "<f4", (table.n,))])
    body = np.zeros(len(table), dtype=rec)
    body["id"] = table.ids
    body["ver"] = table.versions
    body["vec"] = table.vectors
    body["w"] = table.weights
    with open(path, "wb") as fh:
        fh.write(N2O_MAGIC)
        fh.write(struct.pack("<IIIQ", N2O_FORMAT_VERSION, table.d, table.n, len(table)))
        fh.write(body.tobytes())


def load_table(path, table_epoch: int = 0, model_version: int = 0) -> N2OIndexTable:
    data = Path(path).read_bytes()
    if data[:4] != N2O_MAGIC:
        raise ValueError("not an N2O index file (bad magic)")
    version, d, n, count = struct.unpack_from("<IIIQ", data, 4)
    if version != N2O_FORMAT_VERSION:
        raise ValueError(f"unsupported N2O format version {version}")
    rec = np.dtype([("id", "<u8"), ("ver", "<u8"), ("vec", "<f4", (d,)), ("w", "<f4", (n,))])
    body = np.frombuffer(data, dtype=rec, count=count, offset=24)
    return N2OIndexTable(
        body["id"].tolist(),
        body["vec"].reshape(count, d),
        body["w"].reshape(count, n),
        body["ver"].astype(np.int64),
        table_epoch,
        model_version,
    )
