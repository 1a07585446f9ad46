"""Random-hyperplane signatures and bit-packed similarity for long sequences.

Multi-modal item embeddings are hashed to one bit per hyperplane and packed
MSB-first into bytes. Similarity between two signatures is the fraction of
agreeing bits, computed per byte through a 256-entry popcount table, which
feeds both a similarity-weighted pooling head (LSH-DIN) and a tiered
histogram head (SimTier).

Signature table file (little-endian)::

    b"LSH1"  u32 nbits  u64 count
    count * (u64 item_id, ceil(nbits / 8) bytes)
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .core import as_matrix, matmul
from .errors import ContractError, ShapeError
from .features import unit

SIGNATURE_MAGIC = b"LSH1"


def popcount_lut() -> np.ndarray:
    lut = np.zeros(256, dtype=np.uint8)
    for k in range(1, 256):
        lut[k] = lut[k >> 1] + (k & 1)
    return lut


POPCOUNT_LUT = popcount_lut()


@dataclass(frozen=True, eq=False)
class HashPlane:
    """Shared ``nbits x d_mm`` standard-normal projection."""

    W: np.ndarray
    seed: int

    @classmethod
    def create(cls, nbits: int, mm_dim: int, seed: int) -> "HashPlane":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((nbits, mm_dim)).astype(np.float32), seed)

    @property
    def nbits(self) -> int:
        return self.W.shape[0]


def lsh_hash(M, plane: HashPlane) -> np.ndarray:
    """One bit per hyperplane: 1 where the projection is strictly positive."""
    M = as_matrix(M, "M")
    if M.shape[1] != plane.W.shape[1]:
        raise ShapeError(f"embedding width {M.shape[1]} != plane width {plane.W.shape[1]}")
    # Sign(0) maps to bit 0
    return (matmul(M, plane.W, transpose_b=True) > 0).astype(np.uint8)


def pack(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape[-1] % 8:
        raise ShapeError(f"bit length {bits.shape[-1]} is not a multiple of 8")
    return np.packbits(bits, axis=-1, bitorder="big")


def unpack(sig, nbits: int | None = None) -> np.ndarray:
    sig = np.asarray(sig, dtype=np.uint8)
    bits = np.unpackbits(sig, axis=-1, bitorder="big")
    return bits if nbits is None else bits[..., :nbits]


def signatures(M, plane: HashPlane) -> np.ndarray:
    return pack(lsh_hash(M, plane))


def similarity(a, b, lut=POPCOUNT_LUT) -> float:
    a = np.asarray(a, dtype=np.uint8).ravel()
    b = np.asarray(b, dtype=np.uint8).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"signature lengths differ: {a.size} vs {b.size} bytes")
    nbits = 8 * a.size
    return int(lut[255 - (a ^ b)].astype(np.int64).sum()) / nbits


def similarity_matrix(items, seq, lut=POPCOUNT_LUT) -> np.ndarray:
    items = np.atleast_2d(np.asarray(items, dtype=np.uint8))
    seq = np.atleast_2d(np.asarray(seq, dtype=np.uint8))
    if items.shape[1] != seq.shape[1] and items.shape[0] and seq.shape[0]:
        raise ShapeError(f"signature widths differ: {items.shape[1]} vs {seq.shape[1]}")
    return kernels.similarity_matrix(items, seq, lut, 8 * items.shape[1])


def lsh_din(U_seq, M_sim, W_seq) -> np.ndarray:
    """Similarity-weighted sum of projected history rows: ``M_sim (U_seq W_seq^T)``."""
    U_seq, M_sim = as_matrix(U_seq, "U_seq"), as_matrix(M_sim, "M_sim")
    if M_sim.shape[1] != U_seq.shape[0]:
        raise ShapeError(f"M_sim has {M_sim.shape[1]} columns, history has {U_seq.shape[0]} rows")
    return matmul(M_sim, matmul(U_seq, W_seq, transpose_b=True))


def simtier(M_sim, n_tiers: int) -> np.ndarray:
    """Per-row counts over tiers ``[(i-1)/N, i/N)``, the last tier closed at 1.

    Accepts a single row or a matrix; returns an int64 array of matching rank.
    """
    if n_tiers < 1:
        raise ContractError("tier count must be >= 1")
    arr = np.asarray(M_sim, dtype=np.float32)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
        raise ContractError("similarity scores must lie in [0, 1]")
    counts = kernels.simtier_counts(arr, n_tiers)
    return counts[0] if single else counts


# complexity ---------------------------------------------------------------

COMPLEXITY_METHODS = (
    "DIN + SimTier",
    "LSH-DIN + SimTier",
    "DIN + LSH-SimTier",
    "MM-DIN + SimTier",
    "LSH-DIN + LSH-SimTier (AIF)",
)


def complexity_report(b: int, L: int, d_id: int, d_mm: int, d_lsh: int):
    """Multiply-add counts of the attention/similarity modules per variant.

    Returns ``[(method, macs, reduction_percent)]`` with the reduction
    relative to the first (ID-attention plus multi-modal similarity) row.
    """
    for name, v in dict(b=b, L=L, d_id=d_id, d_mm=d_mm, d_lsh=d_lsh).items():
        if v <= 0:
            raise ContractError(f"{name} must be positive")
    bl = b * L
    costs = [
        bl * (d_id + d_mm),
        bl * (d_lsh + d_mm),
        bl * (d_id + d_lsh),
        bl * d_mm,
        bl * d_lsh,
    ]
    base = costs[0]
    return [
        (name, cost, 100.0 * (cost - base) / base)
        for name, cost in zip(COMPLEXITY_METHODS, costs)
    ]


# signature table ------------------------------------------------------------

class SignatureTable:
    """Packed signatures keyed by item id. Immutable; updates return a copy."""

    def __init__(self, nbits: int, ids=(), sigs=None):
        self.nbits = int(nbits)
        self.nbytes = math.ceil(self.nbits / 8)
        ids = [int(i) for i in ids]
        self.index = {item_id: row for row, item_id in enumerate(ids)}
        if sigs is None:
            sigs = np.zeros((len(ids), self.nbytes), dtype=np.uint8)
        self.sigs = np.ascontiguousarray(sigs, dtype=np.uint8)
        self.sigs.setflags(write=False)

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, item_id) -> bool:
        return item_id in self.index

    def ids(self) -> list[int]:
        return list(self.index)

    def get(self, item_id: int) -> np.ndarray:
        return self.sigs[self.index[item_id]]

    def rows(self, item_ids) -> np.ndarray:
        idx = np.fromiter((self.index[int(i)] for i in item_ids), dtype=np.int64)
        return self.sigs[idx]

    def with_updates(self, updates: dict) -> "SignatureTable":
        ids = self.ids()
        sigs = self.sigs.copy()
        extra_ids, extra_rows = [], []
        for item_id, sig in updates.items():
            if item_id in self.index:
                sigs[self.index[item_id]] = sig
            else:
                extra_ids.append(item_id)
                extra_rows.append(sig)
        if extra_rows:
            sigs = np.vstack([sigs, np.asarray(extra_rows, dtype=np.uint8)])
        return SignatureTable(self.nbits, ids + extra_ids, sigs)

    def equals(self, other: "SignatureTable") -> bool:
        if self.nbits != other.nbits or set(self.index) != set(other.index):
            return False
        return all(np.array_equal(self.get(i), other.get(i)) for i in self.index)


def build_signature_table(store, plane: HashPlane) -> SignatureTable:
    ids = store.item_ids()
    if not ids:
        return SignatureTable(plane.nbits)
    mm = np.stack([store.get_item(i).mm_embedding for i in ids])
    return SignatureTable(plane.nbits, ids, signatures(mm, plane))


def signature_update(table: SignatureTable, event, plane: HashPlane) -> SignatureTable:
    """Rehash only the event's item, and only when it carries a new embedding."""
    if event.new_mm_embedding is None:
        return table
    sig = signatures(unit(event.new_mm_embedding), plane)[0]
    return table.with_updates({event.item_id: sig})


def save_signature_table(table: SignatureTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(SIGNATURE_MAGIC)
        fh.write(struct.pack("<IQ", table.nbits, len(table)))
        for item_id in table.ids():
            fh.write(struct.pack("<Q", item_id))
            fh.write(table.get(item_id).tobytes())


def load_signature_table(path) -> SignatureTable:
    data = Path(path).read_bytes()
    if data[:4] != SIGNATURE_MAGIC:
        raise ValueError("not a signature table (bad magic)")
    nbits, count = struct.unpack_from("<IQ", data, 4)
    nbytes = math.ceil(nbits / 8)
    rec = np.dtype([("id", "<u8"), ("sig", "u1", (nbytes,))])
    body = np.frombuffer(data, dtype=rec, count=count, offset=16)
    return SignatureTable(nbits, body["id"].tolist(), body["sig"].reshape(count, nbytes))


# calibration ----------------------------------------------------------------

def random_pairs_at_angles(n_pairs: int, dim: int, rng: np.random.Generator):
    """Unit-vector pairs with angles drawn uniformly from [0, pi]."""
    u = rng.standard_normal((n_pairs, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = rng.standard_normal((n_pairs, dim))
    w -= np.sum(w * u, axis=1, keepdims=True) * u
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    theta = rng.uniform(0.0, math.pi, n_pairs)
    v = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * w
    return u, v


def pair_similarities(u, v, plane: HashPlane):
    """Empirical signature similarity and angle for matched rows of ``u`` and ``v``."""
    su, sv = signatures(u, plane), signatures(v, plane)
    xnor = 255 - (su ^ sv)
    sims = POPCOUNT_LUT[xnor].astype(np.int64).sum(axis=1) / plane.nbits
    u32, v32 = as_matrix(u).astype(np.float64), as_matrix(v).astype(np.float64)
    cos = np.sum(u32 * v32, axis=1) / (
        np.linalg.norm(u32, axis=1) * np.linalg.norm(v32, axis=1)
    )
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    return sims, theta


def angular_calibration(nbits: int, n_pairs: int, mm_dim: int = 64, seed: int = 0, bins: int = 16):
    """Binned empirical similarity against the ``1 - theta/pi`` collision law.

    Returns a list of dict rows plus the pair-weighted mean of the per-bin
    absolute error.
    """
    rng = np.random.default_rng(seed)
    plane = HashPlane.create(nbits, mm_dim, seed + 1)
    u, v = random_pairs_at_angles(n_pairs, mm_dim, rng)
    sims, theta = pair_similarities(u, v, plane)
    theory = 1.0 - theta / math.pi
    edges = np.linspace(0.0, math.pi, bins + 1)
    which = np.clip(np.searchsorted(edges, theta, side="right") - 1, 0, bins - 1)
    rows, weighted = [], 0.0
    for k in range(bins):
        mask = which == k
        count = int(mask.sum())
        if not count:
            continue
        emp, th = float(sims[mask].mean()), float(theory[mask].mean())
        rows.append(
            dict(theta_lo=float(edges[k]), theta_hi=float(edges[k + 1]), pairs=count,
                 mean_similarity=emp, mean_theory=th, abs_error=abs(emp - th))
        )
        weighted += count * abs(emp - th)
    return rows, weighted / max(n_pairs, 1)


def write_calibration_csv(rows, path) -> None:
    fields = ["theta_lo", "theta_hi", "pairs", "mean_similarity", "mean_theory", "abs_error"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
