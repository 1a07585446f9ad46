import numpy as np
import pytest

from aif.bea import bea_item_phase
from aif.errors import N2OMissError
from aif.features import item_embeddings, random_update_events
from aif.model import init_model
from aif.n2o import (
    NearlineEngine,
    apply_incremental,
    load_table,
    lookup,
    rebuild_full,
    reduce_item,
    save_table,
)


def test_rebuild_covers_store_and_matches_direct_forward(small_store, small_model):
    table = rebuild_full(small_store, small_model)
    assert len(table) == len(small_store)
    ids = small_store.item_ids()[:5]
    vec, w = lookup(table, ids)
    emb = item_embeddings(small_store.tables, [small_store.get_item(i) for i in ids])
    ref = reduce_item(emb, small_model.item_mlp)
    np.testing.assert_array_equal(vec, ref)
    np.testing.assert_array_equal(w, bea_item_phase(small_model.bridges, ref))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-5)


def test_incremental_equals_rebuild(small_store, small_model):
    table = rebuild_full(small_store, small_model)
    events = random_update_events(small_store, 60, seed=4)
    for ev in events:
        small_store.apply_item_update(ev)
    inc = table
    for k in range(0, len(events), 7):
        inc = apply_incremental(inc, events[k:k + 7], small_store, small_model)
    assert inc.same_entries(rebuild_full(small_store, small_model))
    assert inc.table_epoch > table.table_epoch


def test_empty_events_keep_table(small_store, small_model):
    table = rebuild_full(small_store, small_model)
    assert apply_incremental(table, [], small_store, small_model) is table


def test_lookup_miss_lists_missing(small_store, small_model):
    table = rebuild_full(small_store, small_model)
    with pytest.raises(N2OMissError) as exc:
        lookup(table, [0, 10**9, 1, 10**9 + 1])
    assert exc.value.missing == [10**9, 10**9 + 1]


def test_table_is_read_only(small_store, small_model):
    table = rebuild_full(small_store, small_model)
    with pytest.raises(ValueError):
        table.vectors[0, 0] = 1.0


def test_save_load_round_trip(tmp_path, small_store, small_model):
    table = rebuild_full(small_store, small_model)
    path = tmp_path / "t.n2o"
    save_table(table, path)
    assert path.read_bytes()[:4] == b"N2O1"
    assert load_table(path).same_entries(table)
    bad = tmp_path / "bad.n2o"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError, match="magic"):
        load_table(bad)


def test_engine_policy(small_store, small_model, small_cfg):
    eng = NearlineEngine(small_store, small_model)
    first = eng.table
    assert eng.full_rebuild_items == len(small_store)
    events = random_update_events(small_store, 5, seed=9, new_item_fraction=0.0)
    for ev in events:
        small_store.apply_item_update(ev)
    assert set(eng.stale_items()) == {ev.item_id for ev in events}
    eng.on_events(events)
    assert eng.stale_items() == []
    assert eng.full_rebuild_items == len(small_store)
    assert eng.incremental_items == len({ev.item_id for ev in events})
    assert eng.on_model_update(small_model) is eng.table
    new_model = init_model(small_cfg, model_version=small_model.model_version + 1)
    table = eng.on_model_update(new_model)
    assert table.model_version == new_model.model_version
    assert eng.full_rebuild_items == 2 * len(small_store)
    assert table.table_epoch > first.table_epoch
