import math

import numpy as np
import pytest
import torch

from conftest import central_difference, random_db, random_features, relative_error, txn
from relcat.gnn import (
    CategoryFrequencyTable,
    GnnConfig,
    GnnHyperparams,
    GnnModel,
    GnnTrainingError,
    HeteroLayer,
    MissingRelationError,
    _keep_indices,
    auc_loss,
    diversity_filter,
    diversity_filter_threshold,
    diversity_schedule,
    embed,
    gnn_rank,
    message_pass,
    prune_for_targets,
    sample_negatives,
    sample_negatives_batch,
    score,
    train_gnn,
)
from relcat.graph import TXN_TXN, HeteroGraph, build_graph, drop_incoming_category_edges
from relcat.sampler import FanoutConfig, materialize_history
from relcat.store import CATEGORY, CODE, COMPANY, TRANSACTION, Row, make_database


def prepared(db, dim=6, seed=0):
    g = build_graph(db, random_features(db, dim, seed))
    return materialize_history(drop_incoming_category_edges(g), FanoutConfig(history_k=4))


def small_model(g, hidden=6, seed=0, **kw):
    torch.manual_seed(seed)
    return GnnModel(GnnConfig.for_graph(g, hidden_dim=hidden, attention_dim=4, **kw))


def test_auc_loss_spot_values():
    one = torch.tensor([1.0], dtype=torch.float64)
    zero = torch.tensor([0.0], dtype=torch.float64)
    idx = torch.tensor([0])
    assert auc_loss(one, zero, idx).item() == 0.0
    assert auc_loss(one, one, idx).item() == 1.0
    v = auc_loss(torch.tensor([0.9], dtype=torch.float64), torch.tensor([0.1], dtype=torch.float64), idx).item()
    assert abs(v - 0.04) < 1e-12
    with pytest.raises(ValueError):
        auc_loss(one, torch.zeros(0), torch.zeros(0, dtype=torch.long))
    pos = torch.tensor([1.0, 0.5])
    neg = torch.tensor([0.0, 0.5, 0.5])
    pairing = torch.tensor([0, 1, 1])
    assert auc_loss(pos, neg, pairing).item() == pytest.approx(2.0)
    assert auc_loss(pos, neg, pairing, reduction="mean").item() == pytest.approx(2 / 3)


def test_score_examples():
    u, w = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0])
    assert score(u, w).item() == 0.0
    assert score(w, w).item() == 9.0
    assert score(2 * (u + w), w).item() == 2 * score(u + w, w).item()
    with pytest.raises(ValueError):
        score(u, torch.ones(3))


def test_auc_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(5)
    for trial in range(20):
        p, per = 1 + trial % 4, 1 + trial % 3
        pos = torch.randn(p, generator=g, dtype=torch.float64, requires_grad=True)
        neg = torch.randn(p * per, generator=g, dtype=torch.float64, requires_grad=True)
        pairing = torch.arange(p).repeat_interleave(per)
        auc_loss(pos, neg, pairing).backward()
        with torch.no_grad():
            num_pos = central_difference(lambda x: auc_loss(x, neg, pairing), pos.detach().clone())
            num_neg = central_difference(lambda x: auc_loss(pos, x, pairing), neg.detach().clone())
        assert relative_error(pos.grad, num_pos) < 1e-4
        assert relative_error(neg.grad, num_neg) < 1e-4


def test_stack_gradient_matches_finite_differences(rng):
    db = random_db(rng, n_companies=2, n_txn=10, null_rate=0.0)
    g = prepared(db, dim=3)
    g = g.with_edges(g.edges, node_features={t: x.double() for t, x in g.node_features.items()})
    model = small_model(g, hidden=3).double()
    pairs = g.category_pairs()
    negs = (pairs[:, 1] + 1) % g.num_nodes(CATEGORY)

    def loss_fn():
        h = model(g)
        s_pos = score(h[TRANSACTION][pairs[:, 0]], h[CATEGORY][pairs[:, 1]])
        s_neg = score(h[TRANSACTION][pairs[:, 0]], h[CATEGORY][negs])
        return auc_loss(s_pos, s_neg, torch.arange(len(pairs)))

    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).flatten()
                          for p in model.parameters()])
    numeric = []
    for p in model.parameters():
        with torch.no_grad():
            numeric.append(central_difference(lambda _: loss_fn(), p.data).flatten())
    assert relative_error(analytic, torch.cat(numeric)) < 1e-4


def test_attention_weights_normalized(rng):
    for trial in range(10):
        db = random_db(rng, n_txn=20)
        g = prepared(db, seed=trial)
        model = small_model(g, seed=trial)
        att = {}
        with torch.no_grad():
            message_pass(model, g, g.node_features, 0, att)
        for t, (w, rels) in att.get("hetero", {}).items():
            assert (w >= 0).all()
            has_any = w.sum(1) > 0
            assert torch.allclose(w.sum(1)[has_any], torch.ones(int(has_any.sum())), atol=1e-6)
        if "gat" in att:
            alpha, dst = att["gat"]
            assert (alpha >= 0).all()
            sums = torch.zeros(g.num_nodes(TRANSACTION)).index_add_(0, dst, alpha)
            present = torch.bincount(dst, minlength=len(sums)) > 0
            assert torch.allclose(sums[present], torch.ones(int(present.sum())), atol=1e-6)


def hand_graph(with_edges=True):
    rel = (TRANSACTION, COMPANY)
    edges = {rel: torch.tensor([[0, 1], [0, 0]])} if with_edges else {}
    feats = {TRANSACTION: torch.tensor([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]), COMPANY: torch.zeros(1, 2)}
    g = HeteroGraph({TRANSACTION: ("a", "b", "c"), COMPANY: ("x",)}, feats, edges,
                    torch.zeros(3, dtype=torch.long), torch.arange(3), torch.zeros(3, dtype=torch.bool))
    layer = HeteroLayer({TRANSACTION: 2, COMPANY: 2}, 2, [rel], 4, True, 0.2)
    with torch.no_grad():
        layer.message["transaction__company"].weight.copy_(torch.eye(2))
        layer.message["transaction__company"].bias.zero_()
    return g, layer


def capture_update_input(layer, node_type):
    seen = []
    layer.update[node_type].register_forward_hook(lambda m, inp, out: seen.append(inp[0].detach()))
    return seen


def test_mean_aggregate_and_singleton_attention():
    g, layer = hand_graph()
    seen = capture_update_input(layer, COMPANY)
    att = {}
    out = layer(g, g.node_features, att)
    assert torch.allclose(seen[0][0, 2:], torch.tensor([0.5, 0.5]))
    w, rels = att["hetero"][COMPANY]
    assert w.tolist() == [[1.0]]
    assert torch.isfinite(out[TRANSACTION]).all()


def test_isolated_nodes_get_zero_message():
    g, layer = hand_graph(with_edges=False)
    seen = capture_update_input(layer, TRANSACTION)
    out = layer(g, g.node_features)
    assert torch.equal(seen[0][:, 2:], torch.zeros(3, 2))
    assert torch.isfinite(out[COMPANY]).all() and torch.isfinite(out[TRANSACTION]).all()


def history_pair_layer(edge_similarity):
    """Target ``c`` has two history neighbors: ``a`` with the same text direction, ``b`` orthogonal."""
    feats = {TRANSACTION: torch.tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])}
    g = HeteroGraph({TRANSACTION: ("a", "b", "c")}, feats, {TXN_TXN: torch.tensor([[0, 1], [2, 2]])},
                    torch.zeros(3, dtype=torch.long), torch.arange(3), torch.zeros(3, dtype=torch.bool))
    layer = HeteroLayer({TRANSACTION: 2}, 2, [TXN_TXN], 4, True, 0.2, edge_similarity)
    with torch.no_grad():
        for lin in (layer.gat_src, layer.gat_dst):
            torch.nn.init.zeros_(lin.weight)
        layer.gat_dst.bias.zero_()
        layer.gat_att.fill_(1.0)
        if edge_similarity:
            layer.gat_edge.fill_(3.0)
    return g, layer


def test_edge_similarity_steers_history_attention():
    for flag, expected in ((True, math.exp(6) / (math.exp(6) + 1)), (False, 0.5)):
        g, layer = history_pair_layer(flag)
        att = {}
        with torch.no_grad():
            layer(g, g.node_features, att)
        alpha, dst = att["gat"]
        assert alpha[0].item() == pytest.approx(expected, rel=1e-6)
        assert alpha.sum().item() == pytest.approx(1.0)
    assert history_pair_layer(False)[1].gat_edge is None


def test_company_scoped_diversity_filter():
    emb = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    hp = GnnHyperparams(epochs=10, diversity="schedule")
    last = hp.epochs - 1
    # batch-wide, the lone row of the second company looks redundant and is dropped
    assert _keep_indices(hp, emb, last)[0].tolist() == [0, 2]
    kept, frac = _keep_indices(hp, emb, last, torch.tensor([0, 0, 0, 1]))
    assert kept.tolist() == [0, 2, 3] and frac == pytest.approx(0.75)
    g = prepared(one_category_per_company(2, 5))
    with pytest.raises(ValueError):
        train_gnn(g, GnnHyperparams(epochs=1, diversity_groups="ledger", hidden_dim=8, attention_dim=4))
    log = []
    train_gnn(g, GnnHyperparams(epochs=3, positive_fraction=1.0, diversity_groups="company",
                                hidden_dim=8, attention_dim=4), on_epoch=log.append)
    assert log[-1]["num_pos"] == 2 * math.ceil(0.4 * 5)


def test_unknown_relation_rejected(rng):
    db = random_db(rng, n_companies=2, n_txn=10)
    g = prepared(db)
    model = small_model(drop_incoming_category_edges(build_graph(db, random_features(db, 6))))
    with pytest.raises(MissingRelationError):
        model(g)


def test_negative_sampler_distribution():
    freq = CategoryFrequencyTable(np.array([10.0, 30.0, 60.0]), smoothing=0.0)
    n = 100_000
    draws = np.array(sample_negatives(freq, 0, n, np.random.default_rng(0)))
    batch = sample_negatives_batch(freq, np.zeros(n // 10, dtype=np.int64), 10, np.random.default_rng(1)).ravel()
    for sample in (draws, batch):
        assert not (sample == 0).any()
        for cat, p in ((1, 1 / 3), (2, 2 / 3)):
            sigma = math.sqrt(p * (1 - p) / n)
            assert abs((sample == cat).mean() - p) < 3 * sigma
    assert sample_negatives(freq, 0, 0, np.random.default_rng(0)) == []
    with pytest.raises(ValueError):
        sample_negatives(CategoryFrequencyTable(np.array([5.0, 0.0]), 0.0), 0, 3, np.random.default_rng(0))
    smoothed = CategoryFrequencyTable.from_links([1, 1], 3)
    assert smoothed.weights.sum() == pytest.approx(1.0) and smoothed.weights[2] > 0


def test_negative_sampler_respects_allowed_sets():
    freq = CategoryFrequencyTable(np.ones(6))
    allowed = [np.array([0, 1, 2]), np.array([3, 4])]
    out = sample_negatives_batch(freq, np.array([0, 4]), 50, np.random.default_rng(0), allowed)
    assert set(out[0].tolist()) == {1, 2} and set(out[1].tolist()) == {3}


def test_diversity_filter_examples():
    emb = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert diversity_filter(emb, 1 / 3).tolist() == [2]
    assert diversity_filter(emb, 1.0).tolist() == [0, 1, 2]
    assert diversity_filter(emb[:1], 0.1).tolist() == [0]
    assert diversity_filter(torch.ones(4, 2), 0.5).tolist() == [0, 1]  # ties by position
    assert diversity_filter(emb, 1 / 3, "max").tolist() == [2]
    with pytest.raises(ValueError):
        diversity_filter(emb, 0.0)
    assert diversity_filter_threshold(emb, -0.5).tolist() == [2]
    wide = torch.randn(20, 4, generator=torch.Generator().manual_seed(0))
    strict, lenient = diversity_filter_threshold(wide, -0.5), diversity_filter_threshold(wide, 0.5)
    assert set(strict.tolist()) < set(lenient.tolist())


def test_diversity_schedule():
    total = 50
    fracs = [diversity_schedule(e, total) for e in range(total)]
    assert fracs[0] == 1.0 and fracs[-1] == pytest.approx(0.4)
    assert all(a >= b for a, b in zip(fracs, fracs[1:]))
    assert fracs[int(0.6 * (total - 1)) + 1] == pytest.approx(0.4)
    with pytest.raises(ValueError):
        diversity_schedule(total, total)


def one_category_per_company(n_companies=3, n_txn=30):
    rows = {COMPANY: [], CATEGORY: [], CODE: [Row("k1", {}, {"name": "K"})], TRANSACTION: []}
    for c in range(n_companies):
        rows[COMPANY].append(Row(f"co{c}", {}, {"name": f"C{c}"}))
        rows[CATEGORY].append(Row(f"c{c}", {"company_fk": f"co{c}", "code_fk": "k1"}, {"name": f"Cat {c}"}))
        for i in range(n_txn):
            rows[TRANSACTION].append(txn(f"t{c}_{i}", f"co{c}", f"c{c}", date=f"2023-01-{1 + i % 28:02d}"))
    return make_database(rows)


TOY_HP = GnnHyperparams(epochs=100, learning_rate=1e-2, positive_fraction=0.2, hidden_dim=16, attention_dim=8)


def test_toy_training_converges():
    db = one_category_per_company()
    g = prepared(db, dim=8)
    log = []
    model = train_gnn(g, TOY_HP, seed=0, on_epoch=log.append)
    assert len(log) == 100
    assert min(r["loss"] for r in log[-10:]) < 0.1
    assert {"epoch", "step", "loss", "kept_fraction", "num_pos", "num_neg"} <= log[0].keys()
    # the company's only historical category ranks first
    target = g.index(TRANSACTION)["t1_29"]
    top = gnn_rank(model, g, target, k=5)
    assert top[0].category_pk == "c1" and top[0].source == "gnn"


def test_training_determinism(rng):
    g = prepared(one_category_per_company(2, 15))
    hp = GnnHyperparams(epochs=8, positive_fraction=0.3, hidden_dim=8, attention_dim=4)
    a, b = [], []
    train_gnn(g, hp, seed=3, on_epoch=a.append)
    train_gnn(g, hp, seed=3, on_epoch=b.append)
    assert [r["loss"] for r in a] == [r["loss"] for r in b]


def test_full_keep_fraction_equals_unfiltered(monkeypatch):
    g = prepared(one_category_per_company(2, 15))
    hp = GnnHyperparams(epochs=6, positive_fraction=0.3, hidden_dim=8, attention_dim=4)
    plain = []
    train_gnn(g, GnnHyperparams(**{**hp.__dict__, "diversity": "none"}), seed=1, on_epoch=plain.append)
    monkeypatch.setattr("relcat.gnn.diversity_schedule", lambda epoch, total: 1.0)
    full = []
    train_gnn(g, hp, seed=1, on_epoch=full.append)
    assert [r["loss"] for r in plain] == [r["loss"] for r in full]


def test_zero_epochs_and_errors(rng):
    g = prepared(one_category_per_company(2, 5))
    hp = GnnHyperparams(epochs=0, hidden_dim=8, attention_dim=4)
    model = train_gnn(g, hp, seed=4)
    fresh = small_model(g, hidden=8, seed=4)
    assert all(torch.equal(p, q) for p, q in zip(model.state_dict().values(), fresh.state_dict().values()))
    empty = prepared(random_db(rng, n_txn=5, null_rate=1.0))
    with pytest.raises(ValueError):
        train_gnn(empty, hp)
    with pytest.raises(GnnTrainingError):
        train_gnn(g, GnnHyperparams(epochs=2, learning_rate=1e30, hidden_dim=8, attention_dim=4))


def test_gnn_rank_ties_and_singletons():
    g = prepared(one_category_per_company(3, 4))
    model = small_model(g)
    flat = torch.zeros(g.num_nodes(CATEGORY), 6)
    top = gnn_rank(model, g, 0, k=3, category_embeddings=flat)
    assert [p.category_pk for p in top] == ["c0", "c1", "c2"]
    assert [p.rank for p in top] == [1, 2, 3]
    one = gnn_rank(model, g, 0, candidate_categories=[2], k=1)
    assert [p.category_pk for p in one] == ["c2"]
    assert gnn_rank(model, g, 0, candidate_categories=[], k=1) == []


def test_pruned_pass_matches_full_pass(rng):
    for trial in range(10):
        db = random_db(rng, n_txn=25)
        g = prepared(db, seed=trial)
        model = small_model(g, seed=trial)
        n = g.num_nodes(TRANSACTION)
        if n == 0:
            continue
        targets = {TRANSACTION: torch.tensor(sorted(rng.choice(n, size=min(3, n), replace=False).tolist())),
                   CATEGORY: torch.arange(g.num_nodes(CATEGORY))}
        with torch.no_grad():
            full = model(g)
            pruned = model(g, layer_graphs=prune_for_targets(g, targets, 2))
        for t, idx in targets.items():
            assert torch.equal(full[t][idx], pruned[t][idx])


def test_embed_is_eval_mode_and_finite(rng):
    g = prepared(random_db(rng, n_txn=12))
    model = small_model(g).train()
    h = embed(model, g)
    assert not model.training
    assert all(torch.isfinite(x).all() for x in h.values())
    assert TXN_TXN in g.edges
