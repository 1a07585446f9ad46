import math

import numpy as np
import pytest

from aif.errors import ContractError, ShapeError
from aif.features import ItemUpdateEvent, random_update_events, unit
from aif.lsh import (
    POPCOUNT_LUT,
    HashPlane,
    angular_calibration,
    build_signature_table,
    complexity_report,
    load_signature_table,
    lsh_din,
    lsh_hash,
    pack,
    pair_similarities,
    random_pairs_at_angles,
    save_signature_table,
    signature_update,
    signatures,
    similarity,
    similarity_matrix,
    simtier,
    unpack,
)


def bit_oracle(a, b):
    """Per-bit agreement count over unpacked bytes, one bit at a time."""
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    agree = 0
    for x, y in zip(a.tolist(), b.tolist()):
        for k in range(8):
            agree += ((x >> k) & 1) == ((y >> k) & 1)
    return agree / (8 * len(a))


def test_lut_properties():
    assert POPCOUNT_LUT[0] == 0 and POPCOUNT_LUT[255] == 8
    assert all(POPCOUNT_LUT[k] == bin(k).count("1") for k in range(256))
    assert all(POPCOUNT_LUT[k] + POPCOUNT_LUT[255 - k] == 8 for k in range(256))


def test_pack_example_and_round_trip():
    assert pack([0, 0, 1, 1, 0, 1, 0, 1]).tolist() == [53]
    assert pack(np.ones(16)).tolist() == [255, 255]
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, (500, 32), dtype=np.uint8)
    assert np.array_equal(unpack(pack(bits)), bits)
    with pytest.raises(ShapeError):
        pack(np.ones(12))


def test_hash_conventions():
    plane = HashPlane.create(16, 8, seed=1)
    assert lsh_hash(np.zeros(8), plane).sum() == 0
    for j in range(16):
        assert lsh_hash(plane.W[j], plane)[0, j] == 1
    with pytest.raises(ShapeError):
        lsh_hash(np.ones(7), plane)


def test_hash_bit_balance():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((1000, 64))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    means = lsh_hash(v, HashPlane.create(32, 64, seed=3)).mean(axis=0)
    assert np.all(np.abs(means - 0.5) <= 0.05)


def test_exhaustive_single_byte_similarity():
    a = np.repeat(np.arange(256, dtype=np.uint8), 256)[:, None]
    b = np.tile(np.arange(256, dtype=np.uint8), 256)[:, None]
    got = 8 - POPCOUNT_LUT[a[:, 0] ^ b[:, 0]].astype(int)
    for x in range(256):
        for y in range(256):
            expected = sum(((x >> k) & 1) == ((y >> k) & 1) for k in range(8))
            assert got[x * 256 + y] == expected
    M = similarity_matrix(np.arange(256, dtype=np.uint8)[:, None], np.arange(256, dtype=np.uint8)[:, None])
    ref = np.array([[bit_oracle(x, y) for y in range(256)] for x in range(256)])
    assert np.array_equal(M.astype(np.float64), ref.astype(np.float32).astype(np.float64))


def test_random_multibyte_similarity():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a, b = rng.integers(0, 256, (2, 4), dtype=np.uint8)
        assert similarity(a, b) == bit_oracle(a, b)
    a = rng.integers(0, 256, 16, dtype=np.uint8)
    assert similarity(a, a) == 1.0 and similarity(a, 255 - a) == 0.0
    with pytest.raises(ShapeError):
        similarity(a, a[:8])


def test_similarity_matrix_loop_oracle():
    rng = np.random.default_rng(5)
    items = rng.integers(0, 256, (8, 4), dtype=np.uint8)
    seq = rng.integers(0, 256, (16, 4), dtype=np.uint8)
    M = similarity_matrix(items, seq)
    ref = np.array([[similarity(i, s) for s in seq] for i in items], dtype=np.float32)
    assert np.array_equal(M, ref)
    np.testing.assert_array_equal(np.diag(similarity_matrix(items, items)), 1.0)


def test_lsh_din():
    rng = np.random.default_rng(6)
    U = rng.standard_normal((5, 4)).astype(np.float32)
    W = rng.standard_normal((3, 4)).astype(np.float32)
    M = rng.random((2, 5)).astype(np.float32)
    ref = M.astype(np.float64) @ (U.astype(np.float64) @ W.T.astype(np.float64))
    np.testing.assert_allclose(lsh_din(U, M, W), ref, rtol=1e-6, atol=1e-6)
    assert not lsh_din(U, np.zeros((2, 5)), W).any()
    np.testing.assert_allclose(lsh_din(U, np.eye(5)[[3]], W)[0], U[3] @ W.T, rtol=1e-6)
    with pytest.raises(ShapeError):
        lsh_din(U, np.ones((2, 4)), W)


def test_simtier_binning():
    assert simtier(np.ones(7), 10).tolist() == [0] * 9 + [7]
    assert simtier(np.zeros(0), 4).tolist() == [0, 0, 0, 0]
    assert simtier([0.0, 0.25, 0.5, 0.7499, 1.0], 4).tolist() == [1, 1, 2, 1]
    rng = np.random.default_rng(7)
    scores = rng.random(200).astype(np.float32)
    ref = [0] * 16
    for s in scores:
        ref[min(int(math.floor(float(s) * 16)), 15)] += 1
    assert simtier(scores, 16).tolist() == ref
    with pytest.raises(ContractError):
        simtier([1.5], 4)
    with pytest.raises(ContractError):
        simtier([0.5], 0)


def test_complexity_report_reductions():
    rows = complexity_report(1024, 100, 64, 64, 8)
    reductions = [r[2] for r in rows]
    assert reductions == [0.0, -43.75, -43.75, -50.0, -93.75]
    assert rows[-1][1] == 1024 * 100 * 8
    with pytest.raises(ContractError):
        complexity_report(0, 1, 1, 1, 1)


def test_angular_fidelity_and_monotonicity():
    rows, err = angular_calibration(128, 10_000, mm_dim=64, seed=0)
    assert err <= 0.02
    assert sum(r["pairs"] for r in rows) == 10_000
    rng = np.random.default_rng(8)
    u, v = random_pairs_at_angles(3000, 64, rng)
    means = []
    sims = np.zeros(3000)
    for s in range(5):
        sim, theta = pair_similarities(u, v, HashPlane.create(128, 64, seed=100 + s))
        sims += sim / 5
    buckets = np.digitize(theta, [math.pi / 3, 2 * math.pi / 3])
    means = [sims[buckets == k].mean() for k in range(3)]
    assert means[0] > means[1] > means[2]


def test_signature_table_io_and_updates(tmp_path, small_store, small_cfg):
    plane = HashPlane.create(small_cfg.lsh_bits, small_cfg.mm_dim, seed=0)
    table = build_signature_table(small_store, plane)
    path = tmp_path / "sigs.lsh"
    save_signature_table(table, path)
    assert path.read_bytes()[:4] == b"LSH1"
    assert load_signature_table(path).equals(table)

    ev = ItemUpdateEvent(0, small_store.get_item(0).attribute_features, 10**6)
    assert signature_update(table, ev, plane) is table

    events = random_update_events(small_store, 20, seed=11)
    updated = table
    for e in events:
        small_store.apply_item_update(e)
        updated = signature_update(updated, e, plane)
    touched = {e.item_id for e in events if e.new_mm_embedding is not None}
    full = build_signature_table(small_store, plane)
    for item_id in full.ids():
        if item_id in touched or item_id in table:
            assert np.array_equal(updated.get(item_id), full.get(item_id))
    for e in events:
        if e.new_mm_embedding is not None and e.item_id not in table:
            direct = pack(lsh_hash(unit(e.new_mm_embedding), plane))[0]
            assert np.array_equal(updated.get(e.item_id), direct)
