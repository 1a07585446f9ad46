import numpy as np
import pytest

from aif.bea import (
    BridgeSet,
    bea_item_phase,
    bea_serve,
    bea_user_phase,
    full_cross_oracle,
    init_bridges,
)
from aif.core import MacCounter
from aif.errors import ShapeError


def make_f(rng, d, d_prime, hidden=12):
    return (
        (rng.standard_normal((d, hidden)).astype(np.float32) * 0.3,
         rng.standard_normal(hidden).astype(np.float32) * 0.1, "relu"),
        (rng.standard_normal((hidden, d_prime)).astype(np.float32) * 0.3,
         np.zeros(d_prime, dtype=np.float32), "identity"),
    )


def softmax64(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mlp64(x, layers):
    h = np.asarray(x, dtype=np.float64)
    for w, b, act in layers:
        h = h @ w.astype(np.float64) + b
        if act == "relu":
            h = np.maximum(h, 0.0)
    return h


def test_user_phase_matches_composition():
    rng = np.random.default_rng(0)
    d, dp = 6, 4
    B = rng.standard_normal((4, d)).astype(np.float32)
    U = rng.standard_normal((8, d)).astype(np.float32)
    f = make_f(rng, d, dp)
    W = softmax64(B.astype(np.float64) @ U.T / np.sqrt(d))
    ref = mlp64(W @ U, f)
    np.testing.assert_allclose(bea_user_phase(B, U, f), ref, rtol=1e-6, atol=1e-6)


def test_single_bridge_single_row():
    rng = np.random.default_rng(1)
    U = rng.standard_normal((1, 5)).astype(np.float32)
    f = make_f(rng, 5, 3)
    V = bea_user_phase(rng.standard_normal((1, 5)), U, f)
    np.testing.assert_allclose(V, mlp64(U, f), rtol=1e-6, atol=1e-6)


def test_identical_user_rows_give_identical_vectors():
    rng = np.random.default_rng(2)
    r = rng.standard_normal(5).astype(np.float32)
    f = make_f(rng, 5, 3)
    V = bea_user_phase(rng.standard_normal((4, 5)), np.tile(r, (7, 1)), f)
    np.testing.assert_allclose(V, np.tile(mlp64(r[None], f), (4, 1)), rtol=1e-5, atol=1e-6)


def test_item_phase_properties():
    rng = np.random.default_rng(3)
    B = rng.standard_normal((5, 4)).astype(np.float32)
    I = rng.standard_normal((9, 4)).astype(np.float32)
    ref = softmax64(I.astype(np.float64) @ B.T / 2.0)
    np.testing.assert_allclose(bea_item_phase(B, I), ref, rtol=1e-6, atol=1e-7)
    np.testing.assert_array_equal(bea_item_phase(B[:1], I), np.ones((9, 1), dtype=np.float32))
    B2 = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [2, -1, 0, 0]], dtype=np.float32)
    w = bea_item_phase(B2, np.array([[0, 0, 3, 1]], dtype=np.float32))
    np.testing.assert_allclose(w, np.full((1, 3), 1 / 3), rtol=1e-6)
    w = bea_item_phase(B, B[2:3] * 4)
    assert int(np.argmax(w)) == 2


def test_serve_properties():
    rng = np.random.default_rng(4)
    V = rng.standard_normal((4, 3)).astype(np.float32)
    w = softmax64(rng.standard_normal((10, 4))).astype(np.float32)
    out = bea_serve(w, V)
    np.testing.assert_allclose(out, w.astype(np.float64) @ V, rtol=1e-6, atol=1e-6)
    assert np.all(out >= V.min(axis=0) - 1e-6) and np.all(out <= V.max(axis=0) + 1e-6)
    one_hot = np.eye(4, dtype=np.float32)[[2, 0, 3]]
    np.testing.assert_array_equal(bea_serve(one_hot, V), V[[2, 0, 3]])


@pytest.mark.parametrize("m", [4, 16, 64])
def test_degenerate_bridge_and_serving_cost(m):
    rng = np.random.default_rng(m)
    b, d, dp = 32, 8, 4
    U = rng.standard_normal((m, d)).astype(np.float32)
    I = rng.standard_normal((b, d)).astype(np.float32)
    B = rng.standard_normal((1, d)).astype(np.float32)
    f = make_f(rng, d, dp)
    V = bea_user_phase(B, U, f)
    W = softmax64(B.astype(np.float64) @ U.T / np.sqrt(d))
    counter = MacCounter()
    out = bea_serve(bea_item_phase(B, I), V, counter=counter)
    np.testing.assert_allclose(out, np.tile(mlp64(W @ U, f), (b, 1)), rtol=1e-6, atol=1e-6)
    assert counter.macs == b * 1 * dp


def test_full_cross_with_one_user_row_equals_bea():
    rng = np.random.default_rng(5)
    U = rng.standard_normal((1, 6)).astype(np.float32)
    I = rng.standard_normal((7, 6)).astype(np.float32)
    B = rng.standard_normal((3, 6)).astype(np.float32)
    f = make_f(rng, 6, 4)
    bea = bea_serve(bea_item_phase(B, I), bea_user_phase(B, U, f))
    np.testing.assert_allclose(full_cross_oracle(U, I, f), bea, rtol=1e-5, atol=1e-6)


def test_full_cross_cost_ratio():
    rng = np.random.default_rng(6)
    b, m, n, d, dp = 1024, 16, 8, 16, 8
    U = rng.standard_normal((m, d)).astype(np.float32)
    I = rng.standard_normal((b, d)).astype(np.float32)
    B = rng.standard_normal((n, d)).astype(np.float32)
    f = make_f(rng, d, dp)
    full, serve = MacCounter(), MacCounter()
    full_cross_oracle(U, I, f, counter=full)
    bea_serve(bea_item_phase(B, I), bea_user_phase(B, U, f), counter=serve)
    assert serve.macs == b * n * dp
    assert full.macs / serve.macs >= m * d / (n * dp)


def test_split_placement_is_bit_identical():
    rng = np.random.default_rng(7)
    B = rng.standard_normal((8, 6)).astype(np.float32)
    U = rng.standard_normal((10, 6)).astype(np.float32)
    I = rng.standard_normal((50, 6)).astype(np.float32)
    f = make_f(rng, 6, 4)
    V = bea_user_phase(B, U, f)
    stored = np.concatenate([bea_item_phase(B, I[k:k + 1]) for k in range(50)])
    assert np.array_equal(bea_serve(stored, V), bea_serve(bea_item_phase(B, I), V))


def test_shape_errors():
    rng = np.random.default_rng(8)
    f = make_f(rng, 4, 2)
    with pytest.raises(ShapeError):
        bea_user_phase(np.ones((2, 4)), np.ones((3, 5)), f)
    with pytest.raises(ShapeError):
        bea_user_phase(np.ones((2, 4)), np.ones((0, 4)), f)
    with pytest.raises(ShapeError):
        bea_item_phase(np.ones((2, 4)), np.ones((3, 5)))
    with pytest.raises(ShapeError):
        bea_serve(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        BridgeSet(np.zeros((0, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        BridgeSet(np.array([[np.inf, 0.0]], dtype=np.float32))


def test_init_bridges_seeded():
    a, b = init_bridges(8, 4, seed=3), init_bridges(8, 4, seed=3)
    assert a.n == 8 and np.array_equal(a.B, b.B)
