"""Bounded computation graphs: top-K similar history plus typed fan-outs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from .graph import TXN_CAT, TXN_TXN, HeteroGraph, Relation, augment_two_hop
from .store import COMPANY, TRANSACTION


@dataclass(frozen=True)
class FanoutConfig:
    fanouts: Mapping[Relation, int] = field(default_factory=dict)  # absent relation = unlimited
    history_k: int = 16
    num_hops: int = 2
    history_strategy: str = "similarity"  # similarity | random
    seed: int = 0

    def __post_init__(self):
        if self.history_k < 1:
            raise ValueError("history_k must be >= 1")
        if any(v < 0 for v in self.fanouts.values()):
            raise ValueError("fan-outs must be >= 0")
        if self.history_strategy not in ("similarity", "random"):
            raise ValueError(f"unknown history strategy {self.history_strategy!r}")

    def limit(self, rel: Relation) -> int | None:
        if rel == TXN_TXN:
            return min(self.history_k, self.fanouts.get(rel, self.history_k))
        return self.fanouts.get(rel)


def cosine_to(target: np.ndarray, rows: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, target.shape[-1])
    tn = np.sqrt((target * target).sum())
    rn = np.sqrt((rows * rows).sum(axis=1))
    if tn == 0 or np.any(rn == 0):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    # elementwise product + row sum keeps each value independent of the row count
    return (rows * (target / tn)).sum(axis=1) / rn


def top_k_similar_history(target_emb, history_embs, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive cosine search: (indices, similarities), descending, ties by index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    history_embs = np.asarray(history_embs, dtype=np.float64)
    if history_embs.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    sims = cosine_to(target_emb, history_embs)
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    return order.astype(np.int64), sims[order]


def history_similarities(graph: HeteroGraph, txn: int) -> tuple[np.ndarray, np.ndarray]:
    """All history candidates of ``txn`` ranked by text similarity: (txn indices, cosines)."""
    cands = graph.history_candidates(txn)
    if len(cands) == 0:
        return cands, np.zeros(0)
    x = graph.node_features[TRANSACTION].numpy()
    idx, sims = top_k_similar_history(x[txn], x[cands], len(cands))
    return cands[idx], sims


def sample_history(graph: HeteroGraph, txn: int, fanout: FanoutConfig) -> np.ndarray:
    """History neighbors of one transaction under the configured strategy, in message order."""
    cands = graph.history_candidates(txn)
    k = fanout.limit(TXN_TXN)
    if len(cands) == 0 or k == 0:
        return np.zeros(0, dtype=np.int64)
    if fanout.history_strategy == "similarity":
        x = graph.node_features[TRANSACTION].numpy()
        idx, _ = top_k_similar_history(x[txn], x[cands], k)
        return cands[idx]
    rng = np.random.default_rng([fanout.seed, int(txn)])
    if len(cands) <= k:
        return cands
    return cands[np.sort(rng.choice(len(cands), size=k, replace=False))]


def materialize_history(graph: HeteroGraph, fanout: FanoutConfig = FanoutConfig()) -> HeteroGraph:
    """Store the sampled transaction->transaction relation explicitly for full-graph passes."""
    graph = augment_two_hop(graph)
    src, dst = [], []
    for v in range(graph.num_nodes(TRANSACTION)):
        nbrs = sample_history(graph, v, fanout)
        src.extend(nbrs.tolist())
        dst.extend([v] * len(nbrs))
    edges = dict(graph.edges)
    edges[TXN_TXN] = torch.tensor([src, dst], dtype=torch.long).reshape(2, -1)
    return graph.with_edges(edges)


@dataclass(frozen=True)
class EgoGraph:
    graph: HeteroGraph
    target: int  # local transaction index of the target
    nodes: Mapping[str, np.ndarray]  # local -> global index per node type


def build_ego_subgraph(graph: HeteroGraph, target_txn: int, fanout: FanoutConfig,
                       rng: np.random.Generator) -> EgoGraph:
    locals_: dict[str, dict[int, int]] = {t: {} for t in graph.node_types}

    def add(t: str, v: int) -> bool:
        if v in locals_[t]:
            return False
        locals_[t][v] = len(locals_[t])
        return True

    add(TRANSACTION, target_txn)
    relations = [r for r in graph.relations if r != TXN_CAT]
    on_the_fly = graph.augmented and TXN_TXN not in graph.edges
    if on_the_fly:
        relations.append(TXN_TXN)
    collected: dict[Relation, list[tuple[int, int, int]]] = {r: [] for r in relations}

    frontier = [(TRANSACTION, target_txn)]
    expanded = set()
    for _ in range(fanout.num_hops):
        nxt = []
        for t, v in frontier:
            if (t, v) in expanded:
                continue
            expanded.add((t, v))
            for rel in relations:
                if rel[1] != t:
                    continue
                if rel == TXN_TXN and on_the_fly:
                    srcs = sample_history(graph, v, fanout)
                    items = [(int(v), rank, int(s)) for rank, s in enumerate(srcs)]
                else:
                    indptr, order = graph.in_csr(rel)
                    pos = order[indptr[v]:indptr[v + 1]]
                    limit = fanout.limit(rel)
                    if limit is not None and len(pos) > limit:
                        if rel == TXN_TXN:
                            pos = pos[:limit]  # materialized lists are already ranked
                        else:
                            pos = np.sort(rng.choice(pos, size=limit, replace=False))
                    srcs = graph.edges[rel][0].numpy()[pos]
                    items = [(int(v), int(p), int(s)) for p, s in zip(pos, srcs)]
                for item in items:
                    collected[rel].append(item)
                    if add(rel[0], item[2]):
                        nxt.append((rel[0], item[2]))
        frontier = nxt

    # company rows of every included transaction, so company_of stays total
    comp = graph.company_of.numpy()
    for v in list(locals_[TRANSACTION]):
        add(COMPANY, int(comp[v]))

    nodes = {t: np.array(sorted(m, key=m.get), dtype=np.int64) for t, m in locals_.items()}
    edges = {}
    for rel, items in collected.items():
        if not items:
            continue
        # group by destination, original order inside each group
        items.sort(key=lambda it: (it[0], it[1]))
        s = [locals_[rel[0]][it[2]] for it in items]
        d = [locals_[rel[1]][it[0]] for it in items]
        edges[rel] = torch.tensor([s, d], dtype=torch.long)
    sel = {t: torch.from_numpy(nodes[t]) for t in nodes}
    txn_sel = sel[TRANSACTION]
    sub = HeteroGraph(
        node_ids={t: tuple(graph.node_ids[t][i] for i in nodes[t]) for t in nodes},
        node_features={t: graph.node_features[t][sel[t]] for t in nodes},
        edges=edges,
        company_of=torch.tensor([locals_[COMPANY][int(c)] for c in graph.company_of[txn_sel]], dtype=torch.long),
        txn_time=graph.txn_time[txn_sel],
        categorized=graph.categorized[txn_sel],
        augmented=graph.augmented,
        dropped=graph.dropped,
    )
    return EgoGraph(sub, locals_[TRANSACTION][target_txn], nodes)
