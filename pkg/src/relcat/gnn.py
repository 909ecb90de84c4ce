"""Two-level heterogeneous message passing and AUC-surrogate link training.

Each layer computes, for every destination node ``v``::

    m_R(v) = mean_{w in N_R(v)} g_R(h_w)          (GATv2-weighted for txn->txn)
    c(v)   = sum_R a_R(v) m_R(v),  a(v) = softmax_R(q(h_v) . k(m_R(v)) / sqrt(d))
    h'(v)  = LayerNorm(GELU(W_T [h_v ; c(v)]))

Scores are inner products of final transaction and category states.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .graph import (
    TXN_TXN,
    HeteroGraph,
    Relation,
    mask_edges,
    relation_name,
    sample_epoch_positives,
)
from .prediction import Prediction, rank_candidates
from .store import CATEGORY, TRANSACTION

log = logging.getLogger(__name__)


class GnnTrainingError(RuntimeError):
    pass


class MissingRelationError(KeyError):
    pass


def linear(module: nn.Linear, x: torch.Tensor) -> torch.Tensor:
    """nn.Linear whose rows do not depend on batch composition when grad is off.

    Small-batch GEMM kernels are not bitwise row-stable, so inference runs one
    GEMV per row; training keeps the fast fused path.
    """
    if torch.is_grad_enabled():
        return module(x)
    n = x.shape[0]
    if n == 0:
        return x.new_zeros((0, module.out_features))
    w = module.weight.t().unsqueeze(0).expand(n, -1, -1)
    y = torch.bmm(x.unsqueeze(1), w).squeeze(1)
    return y + module.bias if module.bias is not None else y


@dataclass(frozen=True)
class GnnConfig:
    node_dims: tuple[tuple[str, int], ...]
    relations: tuple[Relation, ...]
    hidden_dim: int = 64
    num_layers: int = 2
    attention_dim: int = 32
    use_gatv2: bool = True
    negative_slope: float = 0.2
    edge_similarity: bool = True

    @classmethod
    def for_graph(cls, graph: HeteroGraph, **kw) -> "GnnConfig":
        dims = tuple((t, int(graph.node_features[t].shape[1])) for t in graph.node_types)
        rels = list(graph.relations)
        if graph.augmented and TXN_TXN not in rels:
            rels.append(TXN_TXN)
        return cls(dims, tuple(rels), **kw)


def edge_cosine(x: torch.Tensor, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Cosine of input features along each edge, computed rowwise so ego and full passes agree."""
    unit = x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return (unit.index_select(0, src) * unit.index_select(0, dst)).sum(-1)


class HeteroLayer(nn.Module):
    def __init__(self, in_dims: Mapping[str, int], out_dim: int, relations: Sequence[Relation],
                 attention_dim: int, use_gatv2: bool, negative_slope: float, edge_similarity: bool = True):
        super().__init__()
        self.relations = list(relations)
        self.out_dim = out_dim
        self.attention_dim = attention_dim
        self.negative_slope = negative_slope
        self.use_gat = use_gatv2 and TXN_TXN in self.relations
        self.message = nn.ModuleDict({
            relation_name(r): nn.Linear(in_dims[r[0]], out_dim) for r in self.relations
        })
        if self.use_gat:
            d_txn = in_dims[TRANSACTION]
            self.gat_src = nn.Linear(d_txn, out_dim, bias=False)
            self.gat_dst = nn.Linear(d_txn, out_dim)
            self.gat_att = nn.Parameter(torch.empty(out_dim))
            nn.init.normal_(self.gat_att, std=1.0 / math.sqrt(out_dim))
            # input-text cosine of each history edge enters the logit like a GATv2 edge feature
            self.gat_edge = nn.Parameter(torch.randn(out_dim)) if edge_similarity else None
        self.incoming = {t: [r for r in self.relations if r[1] == t] for t in in_dims}
        self.query = nn.ModuleDict({t: nn.Linear(in_dims[t], attention_dim) for t in in_dims if self.incoming[t]})
        self.key = nn.ModuleDict({t: nn.Linear(out_dim, attention_dim) for t in in_dims if self.incoming[t]})
        self.update = nn.ModuleDict({t: nn.Linear(in_dims[t] + out_dim, out_dim) for t in in_dims})
        self.norm = nn.ModuleDict({t: nn.LayerNorm(out_dim) for t in in_dims})

    def forward(self, graph: HeteroGraph, h: Mapping[str, torch.Tensor], attention: dict | None = None):
        for rel in graph.edges:
            if rel not in self.relations:
                raise MissingRelationError(f"relation {rel} has no parameters in this model")
        aggregates: dict[Relation, tuple[torch.Tensor, torch.Tensor]] = {}
        for rel in self.relations:
            edges = graph.edges.get(rel)
            n_dst = h[rel[1]].shape[0]
            if edges is None or edges.shape[1] == 0:
                continue
            src, dst = edges[0], edges[1]
            msg = linear(self.message[relation_name(rel)], h[rel[0]]).index_select(0, src)
            if rel == TXN_TXN and self.use_gat:
                sim = edge_cosine(graph.node_features[TRANSACTION], src, dst) if self.gat_edge is not None else None
                alpha = self._gat_weights(h[TRANSACTION], src, dst, n_dst, sim)
                if attention is not None:
                    attention["gat"] = (alpha.detach(), dst)
                agg = msg.new_zeros((n_dst, self.out_dim)).index_add_(0, dst, alpha.unsqueeze(1) * msg)
            else:
                agg = msg.new_zeros((n_dst, self.out_dim)).index_add_(0, dst, msg)
                deg = torch.bincount(dst, minlength=n_dst).clamp_min(1).to(msg.dtype)
                agg = agg / deg.unsqueeze(1)
            present = torch.bincount(dst, minlength=n_dst) > 0
            aggregates[rel] = (agg, present)

        out = {}
        for t, x in h.items():
            rels = [r for r in self.incoming.get(t, []) if r in aggregates]
            if rels:
                stacked = torch.stack([aggregates[r][0] for r in rels], dim=1)  # (N, R, d)
                present = torch.stack([aggregates[r][1] for r in rels], dim=1)  # (N, R)
                q = linear(self.query[t], x)
                k = linear(self.key[t], stacked.reshape(-1, self.out_dim)).reshape(
                    stacked.shape[0], len(rels), self.attention_dim)
                logits = (k * q.unsqueeze(1)).sum(-1) / math.sqrt(self.attention_dim)
                weights = torch.softmax(logits.masked_fill(~present, -1e9), dim=1) * present
                combined = (weights.unsqueeze(-1) * stacked).sum(1)
                if attention is not None:
                    attention.setdefault("hetero", {})[t] = (weights.detach(), rels)
            else:
                combined = x.new_zeros((x.shape[0], self.out_dim))
            z = linear(self.update[t], torch.cat([x, combined], dim=1))
            out[t] = self.norm[t](F.gelu(z))
        return out

    def _gat_weights(self, x: torch.Tensor, src: torch.Tensor, dst: torch.Tensor, n_dst: int,
                     sim: torch.Tensor | None = None) -> torch.Tensor:
        xs = linear(self.gat_src, x)
        xd = linear(self.gat_dst, x)
        pre = xs.index_select(0, src) + xd.index_select(0, dst)
        if sim is not None:
            pre = pre + sim.to(pre.dtype).unsqueeze(1) * self.gat_edge
        z = F.leaky_relu(pre, self.negative_slope)
        # fused matvec when training; rowwise reduction keeps inference batch-independent
        e = z @ self.gat_att if torch.is_grad_enabled() else (z * self.gat_att).sum(-1)
        peak = torch.full((n_dst,), -math.inf, dtype=e.dtype).scatter_reduce(
            0, dst, e.detach(), reduce="amax", include_self=True)
        ex = torch.exp(e - peak.index_select(0, dst))
        denom = ex.new_zeros(n_dst).index_add_(0, dst, ex)
        return ex / denom.index_select(0, dst)


class GnnModel(nn.Module):
    def __init__(self, config: GnnConfig):
        super().__init__()
        self.config = config
        dims = dict(config.node_dims)
        layers = []
        for _ in range(config.num_layers):
            layers.append(HeteroLayer(dims, config.hidden_dim, config.relations, config.attention_dim,
                                      config.use_gatv2, config.negative_slope, config.edge_similarity))
            dims = {t: config.hidden_dim for t in dims}
        self.layers = nn.ModuleList(layers)
        # unit-gain LayerNorm outputs give initial scores of order sqrt(hidden_dim); start them near 1
        with torch.no_grad():
            for norm in self.layers[-1].norm.values():
                norm.weight.fill_(config.hidden_dim ** -0.25)

    def forward(self, graph: HeteroGraph, h: Mapping[str, torch.Tensor] | None = None,
                layer_graphs: Sequence[HeteroGraph] | None = None) -> dict[str, torch.Tensor]:
        """Full-graph pass. ``layer_graphs`` (see ``prune_for_targets``) swaps in
        per-layer edge sets; rows outside the pruned targets are then meaningless."""
        h = dict(graph.node_features if h is None else h)
        dtype = next(self.parameters()).dtype
        h = {t: x.to(dtype) for t, x in h.items()}
        for i, layer in enumerate(self.layers):
            h = layer(graph if layer_graphs is None else layer_graphs[i], h)
        return h


def prune_for_targets(graph: HeteroGraph, targets: Mapping[str, torch.Tensor], num_layers: int) -> list[HeteroGraph]:
    """Per-layer graphs keeping only edges that can reach ``targets`` at the last layer.

    Node states of the targets are exactly those of the unpruned pass.
    """
    needed = {t: torch.zeros(graph.num_nodes(t), dtype=torch.bool) for t in graph.node_types}
    for t, idx in targets.items():
        needed[t][idx] = True
    out = []
    for _ in range(num_layers):
        edges = {}
        grown = {t: m.clone() for t, m in needed.items()}
        for rel, e in graph.edges.items():
            keep = needed[rel[1]][e[1]]
            edges[rel] = e[:, keep]
            grown[rel[0]][edges[rel][0]] = True
        out.append(graph.with_edges(edges))
        needed = grown
    return out[::-1]


def message_pass(model: GnnModel, graph: HeteroGraph, h: Mapping[str, torch.Tensor],
                 layer: int = 0, attention: dict | None = None) -> dict[str, torch.Tensor]:
    """Apply one layer of the stack; pass a dict as ``attention`` to capture weights."""
    return model.layers[layer](graph, h, attention)


def score(h_txn: torch.Tensor, h_cat: torch.Tensor) -> torch.Tensor:
    if h_txn.shape[-1] != h_cat.shape[-1]:
        raise ValueError("dimension mismatch")
    return (h_txn * h_cat).sum(-1)


def auc_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor, pairing: torch.Tensor,
             reduction: str = "sum") -> torch.Tensor:
    """Squared-hinge AUC surrogate: sum of (1 - s_pos[pairing[j]] + s_neg[j])^2.

    ``pairing[j]`` is the index of the positive pair whose anchor transaction
    negative ``j`` was drawn for.
    """
    if neg_scores.numel() == 0:
        raise ValueError("empty pairing")
    terms = (1.0 - pos_scores[pairing] + neg_scores) ** 2
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class CategoryFrequencyTable:
    counts: np.ndarray
    smoothing: float = 1.0

    @classmethod
    def from_links(cls, category_index: Iterable[int], num_categories: int, smoothing: float = 1.0):
        counts = np.bincount(np.asarray(list(category_index), dtype=np.int64), minlength=num_categories)
        return cls(counts.astype(np.float64), smoothing)

    @property
    def weights(self) -> np.ndarray:
        w = self.counts + self.smoothing
        return w / w.sum()


def sample_negatives(freq: CategoryFrequencyTable, positive_cat: int, n_neg: int,
                     rng: np.random.Generator) -> list[int]:
    w = freq.weights.copy()
    w[positive_cat] = 0.0
    if np.count_nonzero(w) < 1:
        raise ValueError("need at least two categories with nonzero weight")
    if n_neg == 0:
        return []
    return rng.choice(len(w), size=n_neg, p=w / w.sum()).tolist()


def sample_negatives_batch(freq: CategoryFrequencyTable, positives: np.ndarray, n_neg: int,
                           rng: np.random.Generator, allowed: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """(P, n_neg) draws; row i follows the weights renormalized without positives[i].

    Redrawing the collisions is exact rejection sampling of that conditional.
    With ``allowed`` each row draws only from its own candidate subset.
    """
    w = freq.weights
    positives = np.asarray(positives)
    if allowed is not None:
        out = np.empty((len(positives), n_neg), dtype=np.int64)
        for i, (p, cand) in enumerate(zip(positives, allowed)):
            cand = cand[cand != p]
            if len(cand) == 0:
                cand = np.flatnonzero(np.arange(len(w)) != p)
            pw = w[cand] / w[cand].sum()
            out[i] = cand[rng.choice(len(cand), size=n_neg, p=pw)]
        return out
    if np.count_nonzero(w) < 2:
        raise ValueError("need at least two categories with nonzero weight")
    out = rng.choice(len(w), size=(len(positives), n_neg), p=w)
    clash = out == positives[:, None]
    while clash.any():
        out[clash] = rng.choice(len(w), size=int(clash.sum()), p=w)
        clash = out == positives[:, None]
    return out


def redundancy_scores(embeddings: torch.Tensor, statistic: str = "mean") -> torch.Tensor:
    n = embeddings.shape[0]
    if n <= 1:
        return embeddings.new_zeros(n)
    sim = embeddings @ embeddings.t()
    if statistic == "mean":
        return (sim.sum(1) - sim.diagonal()) / (n - 1)
    if statistic == "max":
        return sim.masked_fill(torch.eye(n, dtype=torch.bool), -math.inf).max(1).values
    raise ValueError(f"unknown statistic {statistic!r}")


def diversity_filter(embeddings: torch.Tensor, keep_fraction: float, statistic: str = "mean") -> torch.Tensor:
    """Indices (ascending) of the ceil(keep_fraction * N) least redundant rows."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    n = embeddings.shape[0]
    if keep_fraction == 1.0 or n <= 1:
        return torch.arange(n)
    keep = math.ceil(keep_fraction * n)
    s = redundancy_scores(embeddings, statistic)
    order = sorted(range(n), key=lambda i: (float(s[i]), i))
    return torch.tensor(sorted(order[:keep]), dtype=torch.long)


def diversity_filter_threshold(embeddings: torch.Tensor, std_offset: float, statistic: str = "mean") -> torch.Tensor:
    """Static variant: keep rows whose redundancy is below mean + std_offset * std."""
    n = embeddings.shape[0]
    if n <= 2:
        return torch.arange(n)
    s = redundancy_scores(embeddings, statistic)
    kept = torch.nonzero(s < s.mean() + std_offset * s.std()).flatten()
    return kept if kept.numel() else torch.argmin(s).reshape(1)


def diversity_schedule(epoch: int, total_epochs: int, floor: float = 0.40, decay_span: float = 0.60) -> float:
    """1.0 at epoch 0, linear down to ``floor`` at decay_span of training, flat after."""
    if not 0 <= epoch < total_epochs:
        raise ValueError("epoch out of range")
    if total_epochs == 1:
        return 1.0
    progress = epoch / (total_epochs - 1)
    return 1.0 - (1.0 - floor) * min(1.0, progress / decay_span)


@dataclass(frozen=True)
class GnnHyperparams:
    epochs: int = 200
    learning_rate: float = 5e-3
    weight_decay: float = 0.0
    positive_fraction: float = 0.05
    negatives_per_positive: int = 8
    diversity: str = "schedule"  # schedule | none | strict | lenient
    diversity_statistic: str = "mean"
    diversity_groups: str = "batch"  # batch | company: scope of the redundancy comparison
    frequency_smoothing: float = 1.0
    negative_scope: str = "global"  # global | company
    hidden_dim: int = 64
    num_layers: int = 2
    attention_dim: int = 32
    use_gatv2: bool = True
    edge_similarity: bool = True


def _keep_indices(hp: GnnHyperparams, emb: torch.Tensor, epoch: int,
                  groups: torch.Tensor | None = None) -> tuple[torch.Tensor, float]:
    if hp.diversity == "none":
        return torch.arange(emb.shape[0]), 1.0
    if groups is not None:
        # filter each group on its own, then merge back in batch order
        parts = []
        for g in torch.unique(groups):
            members = torch.nonzero(groups == g).flatten()
            parts.append(members[_keep_indices(hp, emb[members], epoch)[0]])
        kept = torch.sort(torch.cat(parts)).values
        return kept, kept.numel() / max(1, emb.shape[0])
    if hp.diversity == "schedule":
        frac = diversity_schedule(epoch, hp.epochs)
        return diversity_filter(emb, frac, hp.diversity_statistic), frac
    offset = {"strict": -0.5, "lenient": 0.5}.get(hp.diversity)
    if offset is None:
        raise ValueError(f"unknown diversity mode {hp.diversity!r}")
    kept = diversity_filter_threshold(emb, offset, hp.diversity_statistic)
    return kept, kept.numel() / max(1, emb.shape[0])


def company_categories(graph: HeteroGraph) -> list[np.ndarray]:
    """Per company index: category indices owned by that company."""
    from .store import COMPANY

    rel = (CATEGORY, COMPANY)
    n = graph.num_nodes(COMPANY)
    if rel not in graph.edges:
        return [np.arange(graph.num_nodes(CATEGORY))] * n
    e = graph.edges[rel].numpy()
    return [np.sort(e[0][e[1] == c]) for c in range(n)]


def train_gnn(graph: HeteroGraph, hyperparams: GnnHyperparams = GnnHyperparams(), seed: int = 0,
              on_epoch: Callable[[dict], None] | None = None) -> GnnModel:
    links = graph.category_pairs()
    if links.shape[0] == 0:
        raise ValueError("graph has no categorized transactions")
    hp = hyperparams
    if hp.diversity_groups not in ("batch", "company"):
        raise ValueError(f"unknown diversity_groups {hp.diversity_groups!r}")
    torch.manual_seed(seed)
    model = GnnModel(GnnConfig.for_graph(graph, hidden_dim=hp.hidden_dim, num_layers=hp.num_layers,
                                         attention_dim=hp.attention_dim, use_gatv2=hp.use_gatv2,
                                         edge_similarity=hp.edge_similarity))
    if hp.epochs == 0:
        return model
    freq = CategoryFrequencyTable.from_links(links[:, 1].tolist(), graph.num_nodes(CATEGORY),
                                             hp.frequency_smoothing)
    owned = company_categories(graph) if hp.negative_scope == "company" else None
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=hp.learning_rate, weight_decay=hp.weight_decay)
    model.train()
    for epoch in range(hp.epochs):
        mask, positives = sample_epoch_positives(graph, hp.positive_fraction, rng_seed=seed * 100_003 + epoch)
        masked = mask_edges(graph, mask)
        # only anchors and categories are scored, so prune edges that cannot reach them
        layer_graphs = prune_for_targets(
            masked, {TRANSACTION: positives[:, 0], CATEGORY: torch.arange(graph.num_nodes(CATEGORY))},
            len(model.layers))
        h = model(masked, layer_graphs=layer_graphs)
        anchor_h = h[TRANSACTION][positives[:, 0]]
        groups = graph.company_of[positives[:, 0]] if hp.diversity_groups == "company" else None
        kept, frac = _keep_indices(hp, anchor_h.detach(), epoch, groups)
        pos = positives[kept]
        allowed = None
        if owned is not None:
            allowed = [owned[int(c)] for c in graph.company_of[pos[:, 0]]]
        negs = torch.from_numpy(sample_negatives_batch(freq, pos[:, 1].numpy(), hp.negatives_per_positive,
                                                       rng, allowed))
        h_t = h[TRANSACTION][pos[:, 0]]
        s_pos = score(h_t, h[CATEGORY][pos[:, 1]])
        s_neg = score(h_t.unsqueeze(1), h[CATEGORY][negs]).flatten()
        pairing = torch.arange(pos.shape[0]).repeat_interleave(hp.negatives_per_positive)
        loss = auc_loss(s_pos, s_neg, pairing)
        if not torch.isfinite(loss):
            raise GnnTrainingError(f"non-finite loss at epoch {epoch} (lr={hp.learning_rate}, "
                                   f"positives={pos.shape[0]}, negatives={negs.numel()})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_epoch is not None:
            on_epoch({
                "epoch": epoch, "step": epoch, "loss": loss.item() / max(1, s_neg.numel()),
                "kept_fraction": frac, "num_pos": int(pos.shape[0]), "num_neg": int(negs.numel()),
                "pair_accuracy": float((s_pos[pairing] > s_neg).float().mean()),
            })
    model.eval()
    return model


@torch.no_grad()
def embed(model: GnnModel, graph: HeteroGraph) -> dict[str, torch.Tensor]:
    model.eval()
    return model(graph)


@torch.no_grad()
def gnn_rank(model: GnnModel, graph: HeteroGraph, target_txn: int,
             candidate_categories: Sequence[int] | None = None, k: int = 5,
             category_embeddings: torch.Tensor | None = None,
             target_embedding: torch.Tensor | None = None,
             fanout=None, rng: np.random.Generator | None = None) -> list[Prediction]:
    """Rank categories for one transaction by inner product of final states.

    The target state comes from its sampled ego subgraph unless given.
    Category states default to a full-graph forward.
    """
    from .sampler import FanoutConfig, build_ego_subgraph

    if target_embedding is None:
        ego = build_ego_subgraph(graph, target_txn, fanout or FanoutConfig(num_hops=model.config.num_layers),
                                 rng or np.random.default_rng(0))
        target_embedding = embed(model, ego.graph)[TRANSACTION][ego.target]
    if category_embeddings is None:
        category_embeddings = embed(model, graph)[CATEGORY]
    cands = (np.arange(graph.num_nodes(CATEGORY)) if candidate_categories is None
             else np.asarray(candidate_categories, dtype=np.int64))
    if len(cands) == 0:
        return []
    scores = score(target_embedding.unsqueeze(0), category_embeddings[torch.from_numpy(cands)])
    pks = [graph.node_ids[CATEGORY][i] for i in cands]
    return rank_candidates(pks, scores.tolist(), k, "gnn")
