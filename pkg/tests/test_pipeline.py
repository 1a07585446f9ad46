import math

import numpy as np
import pytest

from aif.errors import ConsistencyError, ShapeError
from aif.features import ItemUpdateEvent, item_embeddings, random_update_events
from aif.n2o import lookup
from aif.pipeline import (
    ItemInputs,
    Merger,
    Request,
    closed_form_latency,
    equivalence_check,
    num_batches,
    prerank_score,
    ranking,
)
from aif.precache import lookup_subsequence

LATENCY_EXAMPLE = dict(retrieval_ms=30, user_fetch_ms=10, user_forward_ms=5, item_fetch_ms=8,
                       item_forward_ms=4, prerank_forward_ms=0, parse_base_ms=0,
                       parse_per_event_ms=0)


@pytest.fixture(scope="module")
def merger(small_cfg):
    return Merger(small_cfg)


def req(k, user=0, seed=None):
    return Request(f"r{k}", user, float(k), k if seed is None else seed)


def batch_inputs(m, user_id=0, request_id="x"):
    user = m.store.users[user_id]
    uvec = m._user_vector(user, request_id, 0.0)
    batch = m.retrieval_stub(req(0))
    records = [m.store.get_item(int(i)) for i in batch]
    vec, w = lookup(m.nearline.table, batch)
    raw = item_embeddings(m.store.tables, records)
    sigs = m._candidate_signatures(batch, records)

    def parse(cat):
        res = lookup_subsequence(None, m.sim_store, user_id, cat)
        return res.subsequence, res.delay_ms

    behavior, _ = m.behavior_features(user_id, batch, sigs, parse)
    return uvec, ItemInputs(batch, vec, w, raw, m.model.model_version), behavior


# retrieval ------------------------------------------------------------------------

def test_retrieval_deterministic(merger):
    a, b = merger.retrieval_stub(req(1, seed=5)), merger.retrieval_stub(req(2, seed=5))
    assert np.array_equal(a, b) and len(a) == merger.cfg.candidates
    assert len(set(a.tolist())) == len(a)


def test_retrieval_full_store_is_permutation(small_cfg, small_store, small_model):
    m = Merger(small_cfg.replace(candidates=len(small_store)), small_store, small_model)
    assert sorted(m.retrieval_stub(req(0)).tolist()) == small_store.item_ids()


def test_retrieval_coverage(merger):
    seen = set()
    for k in range(1000):
        seen.update(merger.retrieval_stub(req(k)).tolist())
    assert len(seen) >= 0.95 * len(merger.store)


# scoring --------------------------------------------------------------------------

def test_identical_items_score_identically(merger):
    uvec, items, (din, hist) = batch_inputs(merger)
    dup = lambda a: np.vstack([a[:1], a[:1], a[1:3]])
    twin = ItemInputs(items.item_ids[[0, 0, 1, 2]], dup(items.vectors), dup(items.bea_weights),
                      dup(items.raw), items.model_version)
    s = prerank_score(uvec, twin, (dup(din), dup(hist)), merger.model.head)
    assert s[0] == s[1]


def test_zeroed_head_gives_sigmoid_bias(merger):
    uvec, items, behavior = batch_inputs(merger)
    (w1, b1, a1), (w2, b2, a2) = merger.model.head
    head = ((np.zeros_like(w1), b1, a1), (np.zeros_like(w2), np.full_like(b2, 0.3), a2))
    s = prerank_score(uvec, items, behavior, head)
    np.testing.assert_allclose(s, 1 / (1 + math.exp(-0.3)), rtol=1e-6)


def test_batch_equals_single_item_loop(merger):
    uvec, items, (din, hist) = batch_inputs(merger)
    batch = prerank_score(uvec, items, (din, hist), merger.model.head)
    assert np.all((batch > 0) & (batch < 1))
    for k in range(len(items.item_ids)):
        one = ItemInputs(items.item_ids[k:k + 1], items.vectors[k:k + 1], items.bea_weights[k:k + 1],
                         items.raw[k:k + 1], items.model_version)
        single = prerank_score(uvec, one, (din[k:k + 1], hist[k:k + 1]), merger.model.head)
        assert abs(float(single[0]) - float(batch[k])) <= 1e-6


def test_snapshot_mismatch_and_shape_errors(merger):
    uvec, items, (din, hist) = batch_inputs(merger)
    other = ItemInputs(items.item_ids, items.vectors, items.bea_weights, items.raw,
                       items.model_version + 1)
    with pytest.raises(ConsistencyError):
        prerank_score(uvec, other, (din, hist), merger.model.head)
    with pytest.raises(ShapeError):
        prerank_score(uvec, items, (din[:-1], hist), merger.model.head)


def test_ranking_tie_break():
    assert ranking([5, 3, 9], [0.5, 0.5, 0.7]).tolist() == [9, 3, 5]


# latency --------------------------------------------------------------------------

def test_sequential_example_total(small_cfg, small_store, small_model):
    m = Merger(small_cfg.replace(**LATENCY_EXAMPLE), small_store, small_model)
    _, lat = m.run_sequential(req(0))
    assert lat.batches == 1 and lat.total_ms == 57.0


def test_sequential_user_cost_per_batch(small_cfg, small_store, small_model):
    cfg = small_cfg.replace(**LATENCY_EXAMPLE, mini_batch_size=64)
    _, lat = Merger(cfg, small_store, small_model).run_sequential(req(0))
    assert lat.batches == 2
    assert lat.stages["user_fetch"] == 20 and lat.stages["user_forward"] == 10
    assert lat.total_ms == 30 + 2 * 27


@pytest.mark.parametrize("fetch,forward,expected", [(10, 5, 30 + 8), (25, 15, 40 + 8)])
def test_aif_overlap(small_cfg, small_store, small_model, fetch, forward, expected):
    cfg = small_cfg.replace(**dict(LATENCY_EXAMPLE, user_fetch_ms=fetch, user_forward_ms=forward))
    _, lat = Merger(cfg, small_store, small_model).run_aif(req(0))
    assert lat.user_path_ms == fetch + forward
    assert lat.total_ms == expected


def test_latency_matches_closed_form(small_cfg, small_store, small_model):
    cfg = small_cfg.replace(mini_batch_size=48)
    m = Merger(cfg, small_store, small_model)
    for k in range(5):
        r = req(k, user=k % 3)
        _, seq = m.run_sequential(r)
        _, aif = m.run_aif(r)
        n = num_batches(cfg, cfg.candidates)
        assert seq.total_ms == closed_form_latency(cfg, n, seq.stages["cross_parse"], "sequential")
        prerank_parse = aif.prerank_path_ms - n * (cfg.costs.item_fetch_ms + cfg.costs.prerank_forward_ms)
        prefetch = aif.user_path_ms - cfg.costs.user_fetch_ms - cfg.costs.user_forward_ms
        assert aif.total_ms == closed_form_latency(cfg, n, prerank_parse, "aif", prefetch_ms=prefetch)
        assert aif.total_ms < seq.total_ms


# counters and equivalence ---------------------------------------------------------

def test_redundancy_counters(small_cfg, small_store, small_model):
    m = Merger(small_cfg.replace(mini_batch_size=32), small_store, small_model)
    for k in range(10):
        m.run_sequential(req(k, user=k % 4))
        m.run_aif(req(k, user=k % 4))
    c = m.counters()
    assert c["sequential_user_forward"] == 40
    assert c["aif_user_forward"] == 10
    assert c["sequential_item_forward"] == 10 * small_cfg.candidates
    assert c.get("aif_item_forward", 0) == 0
    m.run_aif(req(3, user=3))
    assert m.counters()["aif_user_forward"] == 10
    events = random_update_events(small_store, 6, seed=2, new_item_fraction=0.0)
    events = list({e.item_id: e for e in events}.values())
    m.apply_updates(events)
    m.drain()
    assert m.counters()["aif_item_forward"] == len(events)


def test_frozen_trace_equivalence(merger):
    report = equivalence_check(merger, [req(1000 + k, user=k % 12) for k in range(100)])
    assert report.passed and report.max_abs_diff == 0.0
    assert all(r.rank_agreement == 1.0 for r in report.rows)
    assert report.to_csv().splitlines()[0].startswith("request_id,max_abs_diff,rank_agreement")


def test_interleaved_update_reported_as_stale(small_cfg, small_store, small_model):
    m = Merger(small_cfg, small_store, small_model)
    trace = [req(k) for k in range(6)]
    hit = int(m.retrieval_stub(trace[3])[0])
    base = random_update_events(small_store, 1, seed=1, new_item_fraction=0.0)[0]
    ev = ItemUpdateEvent(hit, base.new_attribute_features, base.event_seq, base.new_mm_embedding)
    report = equivalence_check(m, trace, updates={3: [ev]})
    stale = [r for r in report.rows if r.stale]
    assert [r.request_id for r in stale] == ["r3"]
    assert stale[0].max_abs_diff > 0
    assert stale[0].drained_diff <= 1e-6
    assert report.passed


def test_empty_trace_passes(merger):
    report = equivalence_check(merger, [])
    assert report.passed and report.rows == [] and report.max_abs_diff == 0.0


def test_model_update_keeps_pipelines_consistent(small_cfg, small_store, small_model):
    from aif.model import init_model

    m = Merger(small_cfg, small_store, small_model)
    m.update_model(init_model(small_cfg, model_version=small_model.model_version + 1))
    report = equivalence_check(m, [req(k) for k in range(3)])
    assert report.passed
