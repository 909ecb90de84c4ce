"""Relational database -> heterogeneous graph conversion.

Every table becomes a node type and every non-null foreign key ``v1 -> v2``
becomes two directed edges: ``(v1, v2)`` under relation ``(T1, T2)`` and
``(v2, v1)`` under the inverse relation ``(T2, T1)``. Relations are keyed by
``(src_type, dst_type)``; messages flow from src to dst.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .store import CATEGORY, COMPANY, TABLE_ORDER, TRANSACTION, RelationalDatabase

Relation = tuple[str, str]

TXN_TXN: Relation = (TRANSACTION, TRANSACTION)
TXN_CAT: Relation = (TRANSACTION, CATEGORY)
CAT_TXN: Relation = (CATEGORY, TRANSACTION)


class DimensionError(ValueError):
    pass


class MaskError(ValueError):
    pass


def relation_name(rel: Relation) -> str:
    return f"{rel[0]}__{rel[1]}"


@dataclass(frozen=True)
class EdgeMask:
    """(transaction index, category index) pairs hidden from message passing."""

    masked_pairs: frozenset[tuple[int, int]] = frozenset()

    @classmethod
    def from_pairs(cls, pairs) -> "EdgeMask":
        return cls(frozenset((int(t), int(c)) for t, c in pairs))

    def __len__(self) -> int:
        return len(self.masked_pairs)


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    node_ids: Mapping[str, tuple[str, ...]]
    node_features: Mapping[str, torch.Tensor]
    edges: Mapping[Relation, torch.Tensor]  # each (2, E) long: row 0 src, row 1 dst
    company_of: torch.Tensor  # transaction index -> company index
    txn_time: torch.Tensor  # transaction index -> temporal rank (0 = oldest)
    categorized: torch.Tensor  # bool per transaction: had a category link at build time
    augmented: bool = False
    dropped: frozenset[Relation] = frozenset()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def node_types(self) -> list[str]:
        return list(self.node_ids)

    @property
    def relations(self) -> list[Relation]:
        return list(self.edges)

    def num_nodes(self, node_type: str) -> int:
        return len(self.node_ids[node_type])

    def num_edges(self, rel: Relation | None = None) -> int:
        if rel is not None:
            return int(self.edges[rel].shape[1]) if rel in self.edges else 0
        return sum(int(e.shape[1]) for e in self.edges.values())

    def index(self, node_type: str) -> dict[str, int]:
        key = ("index", node_type)
        if key not in self._cache:
            self._cache[key] = {pk: i for i, pk in enumerate(self.node_ids[node_type])}
        return self._cache[key]

    def in_csr(self, rel: Relation) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, edge positions) grouping the relation's edges by destination.

        Edge positions inside each destination group keep their original order.
        """
        key = ("csr", rel)
        if key not in self._cache:
            dst = self.edges[rel][1].numpy()
            order = np.argsort(dst, kind="stable")
            counts = np.bincount(dst, minlength=self.num_nodes(rel[1]))
            indptr = np.concatenate([[0], np.cumsum(counts)])
            self._cache[key] = (indptr, order)
        return self._cache[key]

    def company_members(self) -> list[np.ndarray]:
        """Per company index: transaction indices sorted by temporal rank."""
        key = ("members",)
        if key not in self._cache:
            comp = self.company_of.numpy()
            order = np.lexsort((self.txn_time.numpy(), comp))
            bounds = np.searchsorted(comp[order], np.arange(self.num_nodes(COMPANY) + 1))
            self._cache[key] = [order[bounds[c]:bounds[c + 1]] for c in range(self.num_nodes(COMPANY))]
        return self._cache[key]

    def history_candidates(self, txn: int) -> np.ndarray:
        """Categorized same-company transactions strictly older than ``txn``."""
        members = self.company_members()[int(self.company_of[txn])]
        t = int(self.txn_time[txn])
        times = self.txn_time.numpy()[members]
        older = members[times < t]
        return older[self.categorized.numpy()[older]]

    def with_edges(self, edges: Mapping[Relation, torch.Tensor], **changes) -> "HeteroGraph":
        return replace(self, edges=dict(edges), _cache={}, **changes)

    def category_pairs(self) -> torch.Tensor:
        """All (transaction, category) links still present, as a (P, 2) tensor."""
        if CAT_TXN in self.edges:
            e = self.edges[CAT_TXN]
            return torch.stack([e[1], e[0]], dim=1)
        if TXN_CAT in self.edges:
            return self.edges[TXN_CAT].t().clone()
        return torch.zeros((0, 2), dtype=torch.long)


def build_graph(db: RelationalDatabase, features: Mapping[str, torch.Tensor | np.ndarray]) -> HeteroGraph:
    node_ids = {name: tuple(row.pk for row in db[name].rows) for name in TABLE_ORDER}
    feats: dict[str, torch.Tensor] = {}
    for name in TABLE_ORDER:
        if name not in features:
            raise DimensionError(f"no features for node type {name!r}")
        x = torch.as_tensor(np.asarray(features[name]) if not torch.is_tensor(features[name])
                            else features[name]).float()
        n = len(node_ids[name])
        if x.dim() != 2 or x.shape[0] != n:
            raise DimensionError(f"{name}: features shape {tuple(x.shape)} not aligned with {n} rows")
        feats[name] = x

    index = {name: {pk: i for i, pk in enumerate(ids)} for name, ids in node_ids.items()}
    edges: dict[Relation, torch.Tensor] = {}
    for name in TABLE_ORDER:
        table = db[name]
        for col, target in table.schema.foreign_keys:
            src, dst = [], []
            for i, row in enumerate(table.rows):
                ref = row.fkeys.get(col)
                if ref is not None:
                    src.append(i)
                    dst.append(index[target][ref])
            fwd = torch.tensor([src, dst], dtype=torch.long).reshape(2, -1)
            _append(edges, (name, target), fwd)
            _append(edges, (target, name), fwd.flip(0))

    txns = db[TRANSACTION].rows
    company_of = torch.tensor([index[COMPANY][r.fkeys["company_fk"]] for r in txns], dtype=torch.long)
    dates = [r.attributes.get("date", "") for r in txns]
    order = sorted(range(len(txns)), key=lambda i: (dates[i], i))
    txn_time = torch.empty(len(txns), dtype=torch.long)
    txn_time[torch.tensor(order, dtype=torch.long)] = torch.arange(len(txns))
    categorized = torch.tensor([r.fkeys.get("category_fk") is not None for r in txns], dtype=torch.bool)
    return HeteroGraph(node_ids, feats, edges, company_of, txn_time, categorized)


def _append(edges: dict, rel: Relation, pairs: torch.Tensor) -> None:
    edges[rel] = torch.cat([edges[rel], pairs], dim=1) if rel in edges else pairs


def augment_two_hop(g: HeteroGraph) -> HeteroGraph:
    """Mark the same-company transaction relation as present.

    The relation is kept intensional (grouping by ``company_of``); the
    neighbor sampler materializes bounded per-target neighbor lists.
    """
    if g.augmented:
        return g
    return replace(g, augmented=True, _cache={})


def two_hop_pairs(g: HeteroGraph) -> set[tuple[int, int]]:
    """Enumerate every ordered same-company pair. Debug/test helper: O(n^2) per company."""
    if not g.augmented:
        return set()
    out = set()
    for members in g.company_members():
        for a in members:
            for b in members:
                if a != b:
                    out.add((int(a), int(b)))
    return out


def drop_incoming_category_edges(g: HeteroGraph) -> HeteroGraph:
    if TXN_CAT not in g.edges:
        return g
    edges = {rel: e for rel, e in g.edges.items() if rel != TXN_CAT}
    return g.with_edges(edges, dropped=g.dropped | {TXN_CAT})


def mask_edges(g: HeteroGraph, mask: EdgeMask) -> HeteroGraph:
    if not mask.masked_pairs:
        return g.with_edges(g.edges)
    n_cat = max(g.num_nodes(CATEGORY), 1)
    pairs = torch.tensor(sorted(mask.masked_pairs), dtype=torch.long)
    keys = pairs[:, 0] * n_cat + pairs[:, 1]
    existing = g.category_pairs()
    present = torch.isin(keys, existing[:, 0] * n_cat + existing[:, 1])
    if not bool(present.all()):
        missing = [tuple(p) for p in pairs[~present].tolist()][:5]
        raise MaskError(f"masked pairs not present as edges: {missing}")
    edges = dict(g.edges)
    for rel, t_row in ((TXN_CAT, 0), (CAT_TXN, 1)):
        if rel in edges:
            e = edges[rel]
            k = e[t_row] * n_cat + e[1 - t_row]
            edges[rel] = e[:, ~torch.isin(k, keys)]
    return g.with_edges(edges)


def sample_epoch_positives(g: HeteroGraph, fraction: float = 0.05, rng_seed: int = 0):
    """Uniformly pick ceil(fraction * |links|) categorized pairs.

    Returns ``(EdgeMask, positives)`` where positives is a (P, 2) long tensor of
    (transaction, category) rows sorted by transaction index.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    links = g.category_pairs()
    n = links.shape[0]
    if n == 0:
        raise ValueError("graph has no (transaction, category) links to sample")
    size = min(n, math.ceil(fraction * n))
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(n, size=size, replace=False))
    positives = links[torch.from_numpy(chosen)]
    order = torch.argsort(positives[:, 0] * max(g.num_nodes(CATEGORY), 1) + positives[:, 1], stable=True)
    positives = positives[order]
    return EdgeMask.from_pairs(positives.tolist()), positives


def dump_graph(g: HeteroGraph, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rel, e in g.edges.items():
        src_ids, dst_ids = g.node_ids[rel[0]], g.node_ids[rel[1]]
        lines = [f"{src_ids[s]}\t{dst_ids[d]}\n" for s, d in e.t().tolist()]
        (directory / f"{relation_name(rel)}.tsv").write_text("".join(lines), encoding="utf-8")
