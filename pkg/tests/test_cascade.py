import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import txn
from relcat.cascade import (
    CascadeConfig,
    Categorizer,
    Response,
    cascade_stats,
    predict,
    read_responses,
    topk_nn_predict,
    write_responses,
)
from relcat.gnn import GnnConfig, GnnModel
from relcat.graph import build_graph, drop_incoming_category_edges
from relcat.prediction import Prediction
from relcat.sampler import FanoutConfig, materialize_history
from relcat.store import CATEGORY, CODE, COMPANY, TRANSACTION, Row, make_database


def test_duplicate_wins():
    preds = topk_nn_predict([("c2", 0.85), ("c7", 1.0), ("c3", 0.2)])
    assert preds[0] == Prediction("c7", 1.0, 1, "nn")
    assert [p.category_pk for p in preds] == ["c7", "c2"]


def test_cutoff_is_strict():
    assert topk_nn_predict([("c1", 0.8), ("c2", 0.5), ("c3", -1.0)]) == []
    assert topk_nn_predict([]) == []


def test_dedup_walk():
    history = [("a", 0.99), ("a", 0.97), ("b", 0.95), ("a", 0.93), ("c", 0.9), ("b", 0.85)]
    preds = topk_nn_predict(history, 0.8, 5)
    assert [(p.category_pk, p.score, p.rank) for p in preds] == [("a", 0.99, 1), ("b", 0.95, 2), ("c", 0.9, 3)]
    assert len(topk_nn_predict(history, 0.8, 2)) == 2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdefg"), st.floats(-1, 1)), max_size=30),
       st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 6))
def test_threshold_monotonicity(history, t1, t2, k):
    lo, hi = min(t1, t2), max(t1, t2)
    strict, loose = topk_nn_predict(history, hi, k), topk_nn_predict(history, lo, k)
    assert len(strict) <= len(loose) <= k
    assert len({p.category_pk for p in loose}) == len(loose)
    assert all(p.score > lo for p in loose)


def merchant_db():
    """Company ``a`` files eight merchants under six categories; company ``b`` is new."""
    cats = [Row(f"c{i}", {"company_fk": "a", "code_fk": "k"}, {"name": f"Cat {i}"}) for i in range(6)]
    cats.append(Row("c9", {"company_fk": "b", "code_fk": "k"}, {"name": "Other"}))
    txns = []
    for i in range(16):
        m = i % 8
        txns.append(txn(f"t{i}", "a", f"c{m % 6}", desc=f"MERCHANT {m}", date=f"2023-01-{i + 1:02d}"))
    txns.append(txn("q_dup", "a", None, desc="MERCHANT 3", date="2023-02-01"))
    txns.append(txn("q_far", "a", None, desc="UNSEEN", date="2023-02-01"))
    txns.append(txn("q_cold", "b", None, desc="MERCHANT 3", date="2023-02-01"))
    return make_database({COMPANY: [Row("a", {}, {"name": "A"}), Row("b", {}, {"name": "B"})],
                          CODE: [Row("k", {}, {"name": "K"})], CATEGORY: cats, TRANSACTION: txns})


def merchant_features(db, dim=12):
    """Each description maps to its own basis vector, so duplicates have cosine 1 and others 0."""
    g = torch.Generator().manual_seed(0)
    descs = sorted({r.attributes["description"] for r in db[TRANSACTION].rows})
    basis = {d: torch.eye(dim)[i] for i, d in enumerate(descs)}
    feats = {t: torch.randn(len(db[t]), dim, generator=g) for t in (CATEGORY, CODE, COMPANY)}
    feats[TRANSACTION] = torch.stack([basis[r.attributes["description"]] for r in db[TRANSACTION].rows])
    return feats


def categorizer(**kw):
    db = merchant_db()
    fanout = FanoutConfig(history_k=4)
    g = materialize_history(drop_incoming_category_edges(build_graph(db, merchant_features(db))), fanout)
    torch.manual_seed(0)
    gnn = GnnModel(GnnConfig.for_graph(g, hidden_dim=8, attention_dim=4)).eval()
    return Categorizer(g, gnn, CascadeConfig(fanout=fanout, **kw)), g


def test_planted_duplicate_resolves_by_nn():
    cat, g = categorizer()
    r = cat.predict(g.index(TRANSACTION)["q_dup"])
    assert r.predictions[0].category_pk == "c3" and r.predictions[0].source == "nn"
    assert r.nn_count == 1 and r.gnn_invoked
    assert len(r.predictions) == 5 and len(set(r.category_pks)) == 5
    assert [p.rank for p in r.predictions] == [1, 2, 3, 4, 5]
    assert all(p.source == "gnn" for p in r.predictions[1:])


def test_no_neighbors_means_all_gnn():
    cat, g = categorizer()
    for pk in ("q_far", "q_cold"):
        r = cat.predict(g.index(TRANSACTION)[pk])
        assert r.nn_count == 0 and all(p.source == "gnn" for p in r.predictions)
        assert len(r.predictions) == 5


def test_early_exit_skips_gnn(monkeypatch):
    cat, g = categorizer()
    target = g.index(TRANSACTION)["q_dup"]
    r = cat.predict(target, k=1)
    assert not r.gnn_invoked and r.resolved_without_gnn(1)
    monkeypatch.setattr(cat, "gnn_predictions", lambda *a, **kw: pytest.fail("GNN invoked"))
    assert cat.predict(target, k=1).category_pks == ["c3"]


def test_nn_fill_dedups_against_gnn(monkeypatch):
    cat, g = categorizer()
    target = g.index(TRANSACTION)["q_dup"]
    monkeypatch.setattr(cat, "nn_predictions", lambda t, k=None: [Prediction("c0", 0.9, 1, "nn"),
                                                                  Prediction("c1", 0.85, 2, "nn")])
    r = cat.predict(target)
    assert r.category_pks[:2] == ["c0", "c1"] and len(set(r.category_pks)) == 5


def test_nn_only_names_history_categories():
    cat, g = categorizer(threshold=-1.0)
    for pk in ("q_dup", "q_far"):
        r = cat.predict(g.index(TRANSACTION)[pk], k=7)
        nn = {p.category_pk for p in r.predictions if p.source == "nn"}
        assert nn <= {f"c{i}" for i in range(6)}
    assert cat.nn_predictions(g.index(TRANSACTION)["q_cold"]) == []


def test_prediction_count_and_scope():
    cat, g = categorizer(candidate_scope="company")
    r = cat.predict(g.index(TRANSACTION)["q_cold"])
    assert r.category_pks == ["c9"]
    cat, g = categorizer()
    r = cat.predict(g.index(TRANSACTION)["q_far"], k=10)
    assert len(r.predictions) == g.num_nodes(CATEGORY) == 7


def test_ego_and_full_targets_agree_and_predict_is_deterministic():
    cat, g = categorizer()
    target = g.index(TRANSACTION)["q_far"]
    assert torch.equal(cat.target_embedding(target, True), cat.target_embedding(target, False))
    assert cat.predict(target) == cat.predict(target)
    assert predict(target, g, cat.gnn, cat.config) == cat.predict(target)


def response(nn_count, k=5):
    preds = tuple(Prediction(f"c{i}", 1.0 - i / 10, i + 1, "nn" if i < nn_count else "gnn") for i in range(k))
    return Response("t", preds, nn_count, nn_count < k)


def test_cascade_stats():
    stats = cascade_stats([response(n) for n in (0, 1, 1, 3, 5)])
    assert stats == {1: 0.8, 2: 0.4, 3: 0.4, 4: 0.2, 5: 0.2}
    assert cascade_stats([response(1), response(2)])[1] == 1.0
    with pytest.raises(ValueError):
        cascade_stats([])


def test_responses_round_trip(tmp_path):
    rs = [response(n) for n in range(6)]
    write_responses(tmp_path / "r.jsonl", rs)
    assert read_responses(tmp_path / "r.jsonl") == rs
