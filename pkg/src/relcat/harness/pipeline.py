"""End-to-end wiring: data -> tokenizer -> encoder -> graph -> GNN -> predictions."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch

from ..cascade import CascadeConfig, Categorizer, Response, cascade_stats
from ..encoder import (
    EncoderConfig,
    EncoderHyperparams,
    TxnEncoder,
    encode,
    format_transaction,
    train_encoder,
    zero_shot_rank,
)
from ..gnn import GnnConfig, GnnHyperparams, GnnModel, train_gnn
from ..graph import HeteroGraph, build_graph, drop_incoming_category_edges
from ..prediction import Prediction
from ..sampler import FanoutConfig, materialize_history
from ..store import CATEGORY, CODE, COMPANY, TRANSACTION, RelationalDatabase, TransactionRecord
from ..tokenizer import Vocab, train_wordpiece
from .config import Config
from .evaluation import EvalReport, company_histories, evaluate, temporal_split
from .synthetic import SyntheticConfig, generate_synthetic
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)


def synthetic_config(cfg: Config) -> SyntheticConfig:
    return SyntheticConfig(
        num_companies=cfg.num_companies,
        merchants_per_concept=cfg.merchants_per_concept,
        zipf_exponent=cfg.zipf_exponent,
        transactions_per_company=(cfg.min_transactions_per_company, cfg.max_transactions_per_company),
        concepts_per_company=(cfg.min_concepts_per_company, cfg.max_concepts_per_company),
        merchants_per_company=(cfg.min_merchants_per_company, cfg.max_merchants_per_company),
        abbreviation_noise_rate=cfg.abbreviation_noise_rate,
        memo_rate=cfg.memo_rate,
        quirk_rate=cfg.quirk_rate,
        late_merchant_rate=cfg.late_merchant_rate,
        seed=cfg.seed,
    )


def node_texts(db: RelationalDatabase) -> dict[str, list[str]]:
    return {
        TRANSACTION: [format_transaction(t) for t in db.transactions()],
        CATEGORY: [r.attributes["name"] for r in db[CATEGORY].rows],
        CODE: [r.attributes["name"] for r in db[CODE].rows],
        COMPANY: [r.attributes["name"] for r in db[COMPANY].rows],
    }


def tokenizer_corpus(db: RelationalDatabase) -> list[str]:
    texts = node_texts(db)
    return [line for t in (TRANSACTION, CATEGORY, CODE, COMPANY) for line in texts[t]]


def encoder_pairs(db: RelationalDatabase) -> list[tuple[str, str]]:
    names = {r.pk: r.attributes["name"] for r in db[CATEGORY].rows}
    return [(format_transaction(t), names[t.category_fk]) for t in db.transactions() if t.category_fk]


def encoder_config(cfg: Config, vocab: Vocab) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=len(vocab), layers=cfg.encoder_layers, hidden_dim=cfg.encoder_hidden_dim,
        attention_heads=cfg.encoder_heads, feedforward_dim=cfg.encoder_feedforward_dim,
        max_sequence_length=cfg.max_sequence_length, learnable_temperature=cfg.learnable_temperature,
    )


def encoder_hyperparams(cfg: Config) -> EncoderHyperparams:
    return EncoderHyperparams(batch_size=cfg.encoder_batch_size, learning_rate=cfg.encoder_learning_rate,
                              warmup_fraction=cfg.encoder_warmup_fraction, steps=cfg.encoder_steps)


def gnn_hyperparams(cfg: Config, **overrides) -> GnnHyperparams:
    hp = dict(
        epochs=cfg.gnn_epochs, learning_rate=cfg.gnn_learning_rate, positive_fraction=cfg.positive_fraction,
        negatives_per_positive=cfg.negatives_per_positive, diversity=cfg.diversity,
        diversity_statistic=cfg.diversity_statistic, diversity_groups=cfg.diversity_groups,
        frequency_smoothing=cfg.frequency_smoothing,
        negative_scope=cfg.negative_scope, hidden_dim=cfg.gnn_hidden_dim, num_layers=cfg.gnn_layers,
        attention_dim=cfg.gnn_attention_dim, use_gatv2=cfg.gnn_use_gatv2,
        edge_similarity=cfg.gnn_edge_similarity,
    )
    hp.update(overrides)
    return GnnHyperparams(**hp)


def featurize(db: RelationalDatabase, encoder: TxnEncoder, vocab: Vocab) -> dict[str, torch.Tensor]:
    dim = encoder.config.embedding_dim
    return {t: encode(encoder, vocab, texts) if texts else torch.zeros((0, dim))
            for t, texts in node_texts(db).items()}


def fanout_config(cfg: Config, history_strategy: str = "similarity") -> FanoutConfig:
    return FanoutConfig(history_k=cfg.history_k, num_hops=cfg.gnn_layers,
                        history_strategy=history_strategy, seed=cfg.seed)


def prepare_graph(db: RelationalDatabase, features: Mapping[str, torch.Tensor], cfg: Config,
                  two_hop: bool = True, history_strategy: str = "similarity") -> HeteroGraph:
    g = drop_incoming_category_edges(build_graph(db, features))
    if two_hop:
        g = materialize_history(g, fanout_config(cfg, history_strategy))
    return g


@dataclass
class Models:
    vocab: Vocab
    encoder: TxnEncoder
    gnn: GnnModel | None = None
    variant: Mapping[str, object] = field(default_factory=dict)  # graph options the GNN was trained with

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.vocab.save(d / "vocab.txt")
        (d / "encoder.json").write_text(json.dumps(self.encoder.config.__dict__, indent=1))
        save_weights(self.encoder, d / "encoder.bin")
        if self.gnn is not None:
            c = self.gnn.config
            meta = {"node_dims": c.node_dims, "relations": c.relations, "hidden_dim": c.hidden_dim,
                    "num_layers": c.num_layers, "attention_dim": c.attention_dim, "use_gatv2": c.use_gatv2,
                    "edge_similarity": c.edge_similarity,
                    "negative_slope": c.negative_slope, "variant": dict(self.variant)}
            (d / "gnn.json").write_text(json.dumps(meta, indent=1))
            save_weights(self.gnn, d / "gnn.bin")

    @classmethod
    def load(cls, directory: str | Path, need_gnn: bool = False) -> "Models":
        d = Path(directory)
        vocab = Vocab.load(d / "vocab.txt")
        encoder = TxnEncoder(EncoderConfig(**json.loads((d / "encoder.json").read_text())))
        load_weights(d / "encoder.bin", encoder).eval()
        gnn, variant = None, {}
        if (d / "gnn.json").exists():
            meta = json.loads((d / "gnn.json").read_text())
            variant = meta.pop("variant", {})
            meta["node_dims"] = tuple((t, n) for t, n in meta["node_dims"])
            meta["relations"] = tuple(tuple(r) for r in meta["relations"])
            gnn = GnnModel(GnnConfig(**meta))
            load_weights(d / "gnn.bin", gnn).eval()
        elif need_gnn:
            raise FileNotFoundError(f"no trained GNN in {d}")
        return cls(vocab, encoder, gnn, variant)


def train_vocab(db: RelationalDatabase, cfg: Config) -> Vocab:
    return train_wordpiece(tokenizer_corpus(db), cfg.vocab_size, cfg.min_frequency)


def fit_encoder(db: RelationalDatabase, vocab: Vocab, cfg: Config,
                on_step: Callable[[dict], None] | None = None) -> TxnEncoder:
    return train_encoder(encoder_pairs(db), vocab, encoder_config(cfg, vocab), encoder_hyperparams(cfg),
                         seed=cfg.seed, on_step=on_step)


# ---- prediction methods over a prepared graph ---------------------------------

def zero_shot_predictions(db: RelationalDatabase, targets: Sequence[TransactionRecord], models: Models,
                          cfg: Config, k: int) -> dict[str, list[Prediction]]:
    cats = [(r.pk, r.attributes["name"], r.fkeys["company_fk"]) for r in db[CATEGORY].rows]
    emb = encode(models.encoder, models.vocab, [c[1] for c in cats])
    out = {}
    for t in targets:
        idx = [i for i, c in enumerate(cats) if cfg.candidate_scope != "company" or c[2] == t.company_fk]
        if not idx:
            out[t.pk] = []
            continue
        out[t.pk] = zero_shot_rank(models.encoder, models.vocab, t, [(cats[i][0], cats[i][1]) for i in idx],
                                   k, category_embeddings=emb[torch.tensor(idx)])
    return out


def cascade_config(cfg: Config, history_strategy: str = "similarity") -> CascadeConfig:
    return CascadeConfig(k=cfg.top_k, threshold=cfg.nn_threshold, candidate_scope=cfg.candidate_scope,
                         fanout=fanout_config(cfg, history_strategy), seed=cfg.seed)


def run_cascade(categorizer: Categorizer, targets: Sequence[int], k: int, use_ego: bool = True) -> list[Response]:
    return [categorizer.predict(t, k, use_ego=use_ego) for t in targets]


# ---- benchmark -----------------------------------------------------------------

ABLATIONS = {
    "full": dict(two_hop=True, history_strategy="similarity", diversity=None),
    "no_two_hop": dict(two_hop=False, history_strategy="similarity", diversity=None),
    "random_history": dict(two_hop=True, history_strategy="random", diversity=None),
    "no_diversity": dict(two_hop=True, history_strategy="similarity", diversity="none"),
}


@dataclass
class BenchmarkResult:
    reports: dict[str, EvalReport]
    cascade: dict[int, float]
    timings: dict[str, float]
    counts: dict[str, int]
    # in-memory objects for follow-up checks (train db, test records, models, full-variant categorizer)
    artifacts: dict = field(default_factory=dict, repr=False)

    def summary(self) -> str:
        lines = [r.summary(name) for name, r in self.reports.items()]
        lines.append("resolved without GNN: " + "  ".join(f"top{k} {100 * v:.1f}%" for k, v in self.cascade.items()))
        lines.append("timings (s): " + "  ".join(f"{k} {v:.1f}" for k, v in self.timings.items()))
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {"reports": {k: v.as_dict() for k, v in self.reports.items()},
                "cascade": {str(k): v for k, v in self.cascade.items()},
                "timings": self.timings, "counts": self.counts}


def run_benchmark(cfg: Config = Config(), variants: Sequence[str] = tuple(ABLATIONS),
                  log_sink: Callable[[dict], None] | None = None) -> BenchmarkResult:
    sink = log_sink or (lambda rec: None)
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now
        log.info("%s done in %.1fs", name, timings[name])

    db = generate_synthetic(synthetic_config(cfg))
    train_db, test = temporal_split(db, cfg.test_per_company)
    truth = {t.pk: t.category_fk for t in test}
    hist = company_histories(train_db)
    histories = {t.pk: hist.get(t.company_fk, set()) for t in test}
    lap("data")

    vocab = train_vocab(train_db, cfg)
    lap("tokenizer")
    encoder = fit_encoder(train_db, vocab, cfg, on_step=lambda r: sink({"stage": "encoder", **r}))
    lap("encoder")
    models = Models(vocab, encoder)
    features = featurize(train_db, encoder, vocab)
    lap("features")

    reports: dict[str, EvalReport] = {}
    k = cfg.top_k
    reports["zero_shot"] = evaluate(zero_shot_predictions(train_db, test, models, cfg, k), truth, histories)
    lap("zero_shot")

    graphs: dict[tuple, HeteroGraph] = {}
    cascade: dict[int, float] = {}
    artifacts = {"train_db": train_db, "test": test, "models": models, "histories": histories}
    for name in variants:
        opts = ABLATIONS[name]
        key = (opts["two_hop"], opts["history_strategy"])
        if key not in graphs:
            graphs[key] = prepare_graph(train_db, features, cfg, *key)
        graph = graphs[key]
        overrides = {} if opts["diversity"] is None else {"diversity": opts["diversity"]}
        gnn = train_gnn(graph, gnn_hyperparams(cfg, **overrides), seed=cfg.seed,
                        on_epoch=lambda r, n=name: sink({"stage": f"gnn:{n}", **r}))
        lap(f"gnn:{name}")
        cat = Categorizer(graph, gnn, cascade_config(cfg, opts["history_strategy"]))
        targets = [graph.index(TRANSACTION)[t.pk] for t in test]
        gnn_only = {t.pk: cat.gnn_predictions(i, k, use_ego=False) for t, i in zip(test, targets)}
        reports[f"gnn:{name}"] = evaluate(gnn_only, truth, histories)
        if name == "full":
            nn_only = {t.pk: cat.nn_predictions(i, k) for t, i in zip(test, targets)}
            reports["nn"] = evaluate(nn_only, truth, histories)
            responses = run_cascade(cat, targets, k, use_ego=False)
            cascade = cascade_stats(responses, k)
            reports["cascade"] = evaluate({r.transaction_pk: r.predictions for r in responses}, truth, histories,
                                          cascade=cascade)
            models.gnn, models.variant = gnn, {"two_hop": True, "history_strategy": "similarity"}
            artifacts["categorizer"] = cat
        lap(f"eval:{name}")

    for name, rep in reports.items():
        sink({"stage": "report", "method": name, **rep.as_dict()})
    counts = {"transactions": len(db[TRANSACTION]), "categories": len(db[CATEGORY]),
              "companies": len(db[COMPANY]), "test": len(test)}
    return BenchmarkResult(reports, cascade, timings, counts, artifacts)
