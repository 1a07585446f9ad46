import base64
import struct
import threading

import numpy as np
import pytest

from aif.errors import TransportError
from aif.user_engine import (
    AsyncUserVector,
    CacheKey,
    UserAsyncEngine,
    decode_transport,
    encode_transport,
    fnv1a_64,
    self_attention_pre_ffn,
    user_vectors,
)


def test_fnv1a_reference_vectors():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_cache_key_digest():
    k = CacheKey("r1", "alice")
    assert k.digest == fnv1a_64(b"r1|alice")
    assert k == CacheKey("r1", "alice") and k != CacheKey("r1", "bob")


def test_self_attention_single_row_is_identity():
    row = np.array([[0.5, -1.0, 2.0]], dtype=np.float32)
    np.testing.assert_array_equal(self_attention_pre_ffn(row), row)


def test_self_attention_identical_rows():
    rows = np.tile(np.array([[1.0, 2.0]], dtype=np.float32), (4, 1))
    np.testing.assert_allclose(self_attention_pre_ffn(rows), rows, rtol=1e-6)


def test_user_vector_shapes(small_store, small_model, small_cfg):
    u_self, u_prof, V = user_vectors(small_store.users[0], small_store.tables, small_model)
    assert u_self.shape == (1, small_cfg.d)
    assert u_prof.shape == (1, small_cfg.d)
    assert V.shape == (small_cfg.bridges, small_cfg.bea_dim)


def test_compute_once_and_cache_hits(small_store, small_model):
    eng = UserAsyncEngine(small_store.tables, small_model)
    user = small_store.users[1]
    a = eng.compute_and_cache(user, "r1", 1.0)
    b = eng.compute_and_cache(user, "r1", 2.0)
    assert a is b
    assert eng.metrics() == dict(user_cache_hits=1, user_cache_misses=1,
                                 user_cache_evictions=0, user_recomputes=1)


def test_single_flight_under_threads(small_store, small_model):
    eng = UserAsyncEngine(small_store.tables, small_model)
    user = small_store.users[2]
    out = []
    barrier = threading.Barrier(8)

    def worker():
        barrier.wait()
        out.append(eng.compute_and_cache(user, "same", 0.0))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert eng.recomputes == 1
    assert all(v is out[0] for v in out)


def test_oldest_created_is_evicted(small_store, small_model):
    eng = UserAsyncEngine(small_store.tables, small_model, capacity=2)
    user = small_store.users[0]
    eng.compute_and_cache(user, "b", 5.0)
    eng.compute_and_cache(user, "a", 1.0)
    eng.compute_and_cache(user, "c", 9.0)
    assert eng.get(CacheKey("a", user.nickname)) is None
    assert eng.get(CacheKey("b", user.nickname)) is not None
    assert eng.evictions == 1


def _random_vector(rng, special=False):
    d, n, dp = 8, 3, 4
    u_self = rng.standard_normal((1, d)).astype(np.float32)
    u_prof = rng.standard_normal((1, d)).astype(np.float32)
    V = rng.standard_normal((n, dp)).astype(np.float32)
    if special:
        u_self[0, 0] = -0.0
        u_prof[0, 1] = np.float32(1e-45)  # smallest subnormal
        V[0, 0] = np.float32(-1.1754942e-38)
    key = CacheKey(f"req-{rng.integers(1e9)}", f"nick-é-{rng.integers(100)}")
    return AsyncUserVector(key, u_self, u_prof, V, float(rng.random()), int(rng.integers(10)))


def _bits(a):
    return np.asarray(a, dtype=np.float32).view(np.uint32)


def test_transport_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    for i in range(200):
        v = _random_vector(rng, special=i % 2 == 0)
        w = decode_transport(encode_transport(v))
        assert w.key == v.key and w.created_at == v.created_at and w.model_version == v.model_version
        for x, y in ((v.u_self, w.u_self), (v.u_profile_attn, w.u_profile_attn), (v.bea_vectors, w.bea_vectors)):
            assert np.array_equal(_bits(x), _bits(y))


def test_transport_rejects_nan():
    v = _random_vector(np.random.default_rng(1))
    v.u_self[0, 0] = np.nan
    with pytest.raises(ValueError):
        encode_transport(v)


def test_transport_errors_carry_offsets():
    text = encode_transport(_random_vector(np.random.default_rng(2)))
    with pytest.raises(TransportError) as exc:
        decode_transport(text[:10] + "!" + text[11:])
    assert exc.value.offset == 10
    with pytest.raises(TransportError):
        decode_transport(text[:-1])
    raw = base64.b64decode(text)
    with pytest.raises(TransportError, match="truncated"):
        decode_transport(base64.b64encode(raw[:-4]).decode())
    with pytest.raises(TransportError, match="trailing"):
        decode_transport(base64.b64encode(raw + b"\0\0\0\0").decode())
    with pytest.raises(TransportError, match="magic"):
        decode_transport(base64.b64encode(b"XXXX" + raw[4:]).decode())


def test_transport_digest_mismatch():
    raw = bytearray(base64.b64decode(encode_transport(_random_vector(np.random.default_rng(3)))))
    (n,) = struct.unpack_from("<I", raw, 4)
    (m,) = struct.unpack_from("<I", raw, 8 + n)
    at = 12 + n + m
    raw[at] ^= 0xFF
    with pytest.raises(TransportError) as exc:
        decode_transport(base64.b64encode(bytes(raw)).decode())
    assert exc.value.offset == at
