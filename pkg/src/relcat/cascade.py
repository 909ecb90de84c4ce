"""Early-exit inference: nearest-neighbor labels first, GNN ranking for the rest."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .gnn import GnnModel, company_categories, embed, score
from .graph import CAT_TXN, HeteroGraph
from .prediction import Prediction, rank_candidates
from .sampler import FanoutConfig, build_ego_subgraph, history_similarities
from .store import CATEGORY, TRANSACTION

__all__ = [
    "CascadeConfig", "Categorizer", "Prediction", "Response", "cascade_stats",
    "predict", "read_responses", "topk_nn_predict", "write_responses",
]


@dataclass(frozen=True)
class CascadeConfig:
    k: int = 5
    threshold: float = 0.8
    candidate_scope: str = "global"  # global | company
    fanout: FanoutConfig = field(default_factory=FanoutConfig)
    seed: int = 0


@dataclass(frozen=True)
class Response:
    transaction_pk: str
    predictions: tuple[Prediction, ...]
    nn_count: int
    gnn_invoked: bool

    def resolved_without_gnn(self, k: int) -> bool:
        return self.nn_count >= k

    @property
    def category_pks(self) -> list[str]:
        return [p.category_pk for p in self.predictions]


def topk_nn_predict(history: Sequence[tuple[str, float]], threshold: float = 0.8, k: int = 5) -> list[Prediction]:
    """Distinct categories of the most similar history items above ``threshold``.

    ``history`` holds ``(category_pk, similarity)`` pairs. Each category is
    scored by the best similarity supporting it.
    """
    ranked = sorted(history, key=lambda h: -h[1])
    out: list[Prediction] = []
    seen = set()
    for cat, sim in ranked:
        if sim <= threshold:
            break
        if cat in seen:
            continue
        seen.add(cat)
        out.append(Prediction(cat, float(sim), len(out) + 1, "nn"))
        if len(out) == k:
            break
    return out


class Categorizer:
    """Serves predictions over one immutable graph with a trained GNN.

    Category states are computed once by a full-graph pass; target states come
    from per-target ego subgraphs (or, for bulk scoring, the same full pass).
    """

    def __init__(self, graph: HeteroGraph, gnn: GnnModel, config: CascadeConfig = CascadeConfig()):
        self.graph = graph
        self.gnn = gnn
        self.config = config
        full = embed(gnn, graph)
        self.category_embeddings = full[CATEGORY]
        self._full_txn = full[TRANSACTION]
        e = graph.edges.get(CAT_TXN)
        self.txn_category = np.full(graph.num_nodes(TRANSACTION), -1, dtype=np.int64)
        if e is not None:
            self.txn_category[e[1].numpy()] = e[0].numpy()
        self._owned = company_categories(graph)

    def candidates(self, txn: int) -> np.ndarray:
        if self.config.candidate_scope == "company":
            return self._owned[int(self.graph.company_of[txn])]
        return np.arange(self.graph.num_nodes(CATEGORY))

    def nn_predictions(self, txn: int, k: int | None = None) -> list[Prediction]:
        cands, sims = history_similarities(self.graph, txn)
        cat_ids = self.graph.node_ids[CATEGORY]
        history = [(cat_ids[self.txn_category[c]], float(s))
                   for c, s in zip(cands, sims) if self.txn_category[c] >= 0]
        return topk_nn_predict(history, self.config.threshold, k or self.config.k)

    @torch.no_grad()
    def target_embedding(self, txn: int, use_ego: bool = True) -> torch.Tensor:
        if not use_ego:
            return self._full_txn[txn]
        rng = np.random.default_rng([self.config.seed, int(txn)])
        fanout = self.config.fanout
        if fanout.num_hops != len(self.gnn.layers):
            fanout = FanoutConfig(fanout.fanouts, fanout.history_k, len(self.gnn.layers),
                                  fanout.history_strategy, fanout.seed)
        ego = build_ego_subgraph(self.graph, txn, fanout, rng)
        return embed(self.gnn, ego.graph)[TRANSACTION][ego.target]

    def gnn_predictions(self, txn: int, k: int | None = None, exclude: Iterable[str] = (),
                        use_ego: bool = True) -> list[Prediction]:
        k = k or self.config.k
        cands = self.candidates(txn)
        excluded = set(exclude)
        cat_ids = self.graph.node_ids[CATEGORY]
        cands = np.array([c for c in cands if cat_ids[c] not in excluded], dtype=np.int64)
        if len(cands) == 0:
            return []
        h = self.target_embedding(txn, use_ego)
        s = score(h.unsqueeze(0), self.category_embeddings[torch.from_numpy(cands)])
        return rank_candidates([cat_ids[c] for c in cands], s.tolist(), k, "gnn")

    def predict(self, txn: int, k: int | None = None, use_ego: bool = True) -> Response:
        k = k or self.config.k
        nn_preds = self.nn_predictions(txn, k)
        preds = list(nn_preds)
        invoked = False
        if len(preds) < k:
            invoked = True
            fill = self.gnn_predictions(txn, k - len(preds), exclude=[p.category_pk for p in preds],
                                        use_ego=use_ego)
            preds += [Prediction(p.category_pk, p.score, len(preds) + i + 1, "gnn") for i, p in enumerate(fill)]
        return Response(self.graph.node_ids[TRANSACTION][txn], tuple(preds), len(nn_preds), invoked)


def predict(target: int, graph: HeteroGraph, gnn: GnnModel, config: CascadeConfig = CascadeConfig()) -> Response:
    """One-off cascade prediction; build a Categorizer to amortize category states."""
    return Categorizer(graph, gnn, config).predict(target)


def cascade_stats(responses: Sequence[Response], max_k: int = 5) -> dict[int, float]:
    """Fraction of responses resolved by the nearest-neighbor stage alone, per k."""
    if not responses:
        raise ValueError("no responses")
    n = len(responses)
    return {k: sum(r.resolved_without_gnn(k) for r in responses) / n for k in range(1, max_k + 1)}


def response_record(r: Response) -> dict:
    return {
        "transaction_pk": r.transaction_pk,
        "predictions": [
            {"rank": p.rank, "category_pk": p.category_pk, "score": p.score, "source": p.source}
            for p in r.predictions
        ],
        "nn_count": r.nn_count,
        "gnn_invoked": r.gnn_invoked,
    }


def write_responses(path: str | Path, responses: Iterable[Response]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in responses:
            fh.write(json.dumps(response_record(r)) + "\n")


def read_responses(path: str | Path) -> list[Response]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            preds = tuple(Prediction(p["category_pk"], float(p["score"]), int(p["rank"]), p["source"])
                          for p in rec["predictions"])
            nn_count = rec.get("nn_count", sum(p.source == "nn" for p in preds))
            out.append(Response(rec["transaction_pk"], preds, int(nn_count), bool(rec.get("gnn_invoked"))))
    return out
