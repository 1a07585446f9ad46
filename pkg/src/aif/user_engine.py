"""Asynchronous user-side inference.

Runs while retrieval is still in flight: projects the profile and behavior
embeddings, applies self-attention over the sequence and profile-to-sequence
cross-attention, computes the per-bridge user vectors, and caches the
result under a key derived from the request id and user nickname.

Transport payload (before standard base-64 with padding), little-endian::

    b"AUV1"
    u32 len, request_id (utf-8)   u32 len, nickname (utf-8)   u64 digest
    f64 created_at   u64 model_version
    u32 d, d * f32 u_self, d * f32 u_profile_attn
    u32 n, u32 d', n * d' * f32 bea_vectors
"""
from __future__ import annotations

import base64
import binascii
import heapq
import itertools
import math
import re
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .bea import bea_user_phase
from .core import as_matrix, matmul, mean_pool_rows, mlp_forward, scaled_attention
from .errors import ShapeError, TransportError
from .features import materialize_user

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
TRANSPORT_MAGIC = b"AUV1"


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class CacheKey:
    request_id: str
    user_nickname: str
    digest: int = field(init=False)

    def __post_init__(self):
        raw = f"{self.request_id}|{self.user_nickname}".encode("utf-8")
        object.__setattr__(self, "digest", fnv1a_64(raw))


@dataclass(frozen=True, eq=False)
class AsyncUserVector:
    key: CacheKey
    u_self: np.ndarray  # 1 x d
    u_profile_attn: np.ndarray  # 1 x d
    bea_vectors: np.ndarray  # n x d'
    created_at: float = 0.0
    model_version: int = 0

    @property
    def combined(self) -> np.ndarray:
        """``[u_self | u_profile_attn]``, 1 x 2d."""
        return np.concatenate([self.u_self, self.u_profile_attn], axis=1)


# model pieces -----------------------------------------------------------------

def project_user(U_profile, U_seq, W_profile, W_seq):
    return (
        matmul(U_profile, W_profile, transpose_b=True),
        matmul(U_seq, W_seq, transpose_b=True),
    )


def self_attention_pre_ffn(U_seq_hat) -> np.ndarray:
    U_seq_hat = as_matrix(U_seq_hat, "U_seq_hat")
    if U_seq_hat.shape[0] < 1:
        raise ShapeError("self-attention needs at least one sequence row")
    return scaled_attention(U_seq_hat, U_seq_hat, U_seq_hat, math.sqrt(U_seq_hat.shape[1]))


def self_attention_user(U_seq_hat, ffn_layers) -> np.ndarray:
    return mean_pool_rows(mlp_forward(self_attention_pre_ffn(U_seq_hat), ffn_layers))


def profile_cross_attention(U_profile_hat, U_seq_hat) -> np.ndarray:
    U_profile_hat = as_matrix(U_profile_hat, "U_profile_hat")
    return scaled_attention(U_profile_hat, U_seq_hat, U_seq_hat, math.sqrt(U_profile_hat.shape[1]))


def user_vectors(user, tables, model):
    """``(u_self, u_profile_attn, bea_vectors)`` for one user, cache-free."""
    U_profile, U_seq = materialize_user(user, tables)
    p_hat, s_hat = project_user(U_profile, U_seq, model.w_profile, model.w_seq)
    u_self = self_attention_user(s_hat, model.ffn)
    u_prof = profile_cross_attention(p_hat, s_hat)
    bea_rows = np.concatenate([p_hat, s_hat], axis=0)
    V = bea_user_phase(model.bridges, bea_rows, model.bea_mlp)
    return u_self, u_prof, V


# cache --------------------------------------------------------------------------

class UserAsyncEngine:
    """Computes and caches user vectors, at most once per key.

    Concurrent callers for the same key wait on a per-key lock; callers for
    other keys are not blocked by the computation. When the cache is full the
    entry with the smallest ``created_at`` is evicted (ties: first inserted).
    """

    def __init__(self, tables, model, capacity: int = 100_000):
        self.tables = tables
        self.model = model
        self.capacity = capacity
        self._cache: dict = {}
        self._age: list = []  # heap of (created_at, insertion order, key)
        self._order = itertools.count()
        self._lock = threading.Lock()
        self._inflight: dict = {}
        self.hits = self.misses = self.evictions = self.recomputes = 0

    def get(self, key: CacheKey):
        return self._cache.get(key)

    def __len__(self) -> int:
        return len(self._cache)

    def compute_and_cache(self, user, request_id, created_at: float = 0.0) -> AsyncUserVector:
        key = CacheKey(str(request_id), user.nickname)
        cached = self._cache.get(key)
        if cached is not None:
            with self._lock:
                self.hits += 1
            return cached
        with self._lock:
            flight = self._inflight.setdefault(key, threading.Lock())
        with flight:
            cached = self._cache.get(key)
            if cached is not None:
                with self._lock:
                    self.hits += 1
                return cached
            u_self, u_prof, V = user_vectors(user, self.tables, self.model)
            vec = AsyncUserVector(key, u_self, u_prof, V, float(created_at), self.model.model_version)
            with self._lock:
                self.misses += 1
                self.recomputes += 1
                self._cache[key] = vec
                heapq.heappush(self._age, (vec.created_at, next(self._order), key))
                while len(self._cache) > self.capacity:
                    _, _, oldest = heapq.heappop(self._age)
                    del self._cache[oldest]
                    self.evictions += 1
                self._inflight.pop(key, None)
            return vec

    def metrics(self) -> dict:
        return dict(
            user_cache_hits=self.hits,
            user_cache_misses=self.misses,
            user_cache_evictions=self.evictions,
            user_recomputes=self.recomputes,
        )


# transport ------------------------------------------------------------------------

_B64_CHARS = re.compile(rb"[^A-Za-z0-9+/=]")


def _f32_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_transport(v: AsyncUserVector) -> str:
    rid = v.key.request_id.encode("utf-8")
    nick = v.key.user_nickname.encode("utf-8")
    u_self = np.asarray(v.u_self, dtype=np.float32).reshape(-1)
    u_prof = np.asarray(v.u_profile_attn, dtype=np.float32).reshape(-1)
    if u_self.size != u_prof.size:
        raise ShapeError("u_self and u_profile_attn widths differ")
    bea = np.asarray(v.bea_vectors, dtype=np.float32)
    if bea.ndim != 2:
        bea = bea.reshape(0, 0)
    for arr in (u_self, u_prof, bea):
        if not np.all(np.isfinite(arr)):
            raise ValueError("transport vectors must be finite")
    parts = [
        TRANSPORT_MAGIC,
        struct.pack("<I", len(rid)), rid,
        struct.pack("<I", len(nick)), nick,
        struct.pack("<QdQ", v.key.digest, v.created_at, v.model_version),
        struct.pack("<I", u_self.size), _f32_bytes(u_self), _f32_bytes(u_prof),
        struct.pack("<II", *bea.shape), _f32_bytes(bea),
    ]
    return base64.b64encode(b"".join(parts)).decode("ascii")


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TransportError(f"truncated payload reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def decode_transport(text: str) -> AsyncUserVector:
    raw = text.encode("ascii", errors="replace") if isinstance(text, str) else bytes(text)
    bad = _B64_CHARS.search(raw)
    if bad:
        raise TransportError("invalid base-64 character", bad.start())
    if len(raw) % 4:
        raise TransportError("base-64 length is not a multiple of 4", len(raw))
    try:
        data = base64.b64decode(raw, validate=True)
    except binascii.Error as exc:
        pad = raw.find(b"=")
        raise TransportError(f"bad base-64 padding: {exc}", pad if pad >= 0 else len(raw)) from None
    cur = _Cursor(data)
    if cur.take(4, "magic") != TRANSPORT_MAGIC:
        raise TransportError("bad magic", 0)
    (n,) = cur.unpack("<I", "request id length")
    rid = cur.take(n, "request id").decode("utf-8")
    (n,) = cur.unpack("<I", "nickname length")
    nick = cur.take(n, "nickname").decode("utf-8")
    digest_at = cur.pos
    digest, created_at, model_version = cur.unpack("<QdQ", "header")
    (d,) = cur.unpack("<I", "vector width")
    u_self = cur.floats(d, "u_self")[None, :]
    u_prof = cur.floats(d, "u_profile_attn")[None, :]
    rows, cols = cur.unpack("<II", "bea shape")
    bea = cur.floats(rows * cols, "bea vectors").reshape(rows, cols)
    if cur.pos != len(data):
        raise TransportError("trailing bytes after payload", cur.pos)
    key = CacheKey(rid, nick)
    if key.digest != digest:
        raise TransportError("key digest does not match request id and nickname", digest_at)
    return AsyncUserVector(key, u_self, u_prof, bea, created_at, model_version)
