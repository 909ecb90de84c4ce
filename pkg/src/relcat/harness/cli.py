"""Command-line entry point: ``relcat <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..cascade import Categorizer, read_responses, cascade_stats, write_responses
from ..store import TRANSACTION, load_database, save_database
from .config import Config, dump_config, load_config
from .evaluation import company_histories, evaluate, temporal_split
from .pipeline import (
    Models,
    cascade_config,
    featurize,
    fit_encoder,
    gnn_hyperparams,
    prepare_graph,
    run_benchmark,
    synthetic_config,
    train_vocab,
    zero_shot_predictions,
)
from .synthetic import generate_synthetic

log = logging.getLogger("relcat")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("RELCAT_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise SystemExit(f"RELCAT_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _jsonl_sink(path: str | None):
    if not path:
        return None
    fh = open(path, "a", encoding="utf-8")

    def sink(record: dict) -> None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()
    return sink


def _config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "top_k", None) is not None:
        cfg = cfg.replace(top_k=args.top_k)
    return cfg


def _split(args, cfg: Config):
    if not args.data:
        raise SystemExit("--data DIR is required")
    return temporal_split(load_database(args.data), cfg.test_per_company)


def cmd_generate(args, cfg: Config) -> int:
    if not args.out:
        raise SystemExit("--out DIR is required")
    save_database(generate_synthetic(synthetic_config(cfg)), args.out)
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_train_tokenizer(args, cfg: Config) -> int:
    train_db, _ = _split(args, cfg)
    vocab = train_vocab(train_db, cfg)
    out = Path(args.out or Path(args.models) / "vocab.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    print(f"vocabulary of {len(vocab)} tokens written to {out}")
    return 0


def cmd_train_encoder(args, cfg: Config) -> int:
    from ..tokenizer import Vocab

    train_db, _ = _split(args, cfg)
    vocab = Vocab.load(Path(args.models) / "vocab.txt")
    encoder = fit_encoder(train_db, vocab, cfg, on_step=_jsonl_sink(args.metrics))
    Models(vocab, encoder).save(args.models)
    print(f"encoder written to {args.models}")
    return 0


def cmd_train_gnn(args, cfg: Config) -> int:
    from ..gnn import train_gnn

    train_db, _ = _split(args, cfg)
    models = Models.load(args.models)
    graph = prepare_graph(train_db, featurize(train_db, models.encoder, models.vocab), cfg)
    models.gnn = train_gnn(graph, gnn_hyperparams(cfg), seed=cfg.seed, on_epoch=_jsonl_sink(args.metrics))
    models.variant = {"two_hop": True, "history_strategy": "similarity"}
    models.save(args.models)
    print(f"GNN written to {args.models}")
    return 0


def cmd_predict(args, cfg: Config) -> int:
    train_db, _ = _split(args, cfg)
    models = Models.load(args.models, need_gnn=not args.zero_shot)
    targets = [t for t in train_db.transactions() if not t.category_fk]
    if args.zero_shot:
        from ..cascade import Response

        preds = zero_shot_predictions(train_db, targets, models, cfg, cfg.top_k)
        responses = [Response(t.pk, tuple(preds[t.pk]), 0, False) for t in targets]
    else:
        graph = prepare_graph(train_db, featurize(train_db, models.encoder, models.vocab), cfg)
        cat = Categorizer(graph, models.gnn, cascade_config(cfg))
        index = graph.index(TRANSACTION)
        responses = [cat.predict(index[t.pk], cfg.top_k) for t in targets]
    out = args.out or "predictions.jsonl"
    write_responses(out, responses)
    print(f"{len(responses)} predictions written to {out}")
    return 0


def cmd_evaluate(args, cfg: Config) -> int:
    train_db, test = _split(args, cfg)
    if not args.predictions:
        raise SystemExit("--predictions PATH is required")
    responses = {r.transaction_pk: r.predictions for r in read_responses(args.predictions)}
    truth = {t.pk: t.category_fk for t in test}
    hist = company_histories(train_db)
    histories = {t.pk: hist.get(t.company_fk, set()) for t in test}
    report = evaluate({pk: responses.get(pk, ()) for pk in truth}, truth, histories)
    print(report.summary("predictions"))
    if args.out:
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=1))
    return 0


def cmd_cascade_stats(args, cfg: Config) -> int:
    if not args.predictions:
        raise SystemExit("--predictions PATH is required")
    stats = cascade_stats(read_responses(args.predictions), cfg.top_k)
    for k, v in stats.items():
        print(f"top{k}: {100 * v:.1f}% resolved without GNN")
    return 0


def cmd_benchmark(args, cfg: Config) -> int:
    result = run_benchmark(cfg, log_sink=_jsonl_sink(args.metrics))
    print(result.summary())
    if args.out:
        Path(args.out).write_text(json.dumps(result.as_dict(), indent=1))
    return 0


def cmd_show_config(args, cfg: Config) -> int:
    sys.stdout.write(dump_config(cfg))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train-tokenizer": cmd_train_tokenizer,
    "train-encoder": cmd_train_encoder,
    "train-gnn": cmd_train_gnn,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "cascade-stats": cmd_cascade_stats,
    "benchmark": cmd_benchmark,
    "show-config": cmd_show_config,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relcat", description="Transaction categorization over a relational graph.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--out", help="output path")
        p.add_argument("--top-k", type=int, default=None, help="predictions per transaction (default 5)")
        p.add_argument("--zero-shot", action="store_true", help="rank by text similarity only")
        p.add_argument("--models", default="models", help="model directory (default ./models)")
        p.add_argument("--predictions", help="predictions file (JSON lines)")
        p.add_argument("--metrics", help="append training metrics as JSON lines")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    return COMMANDS[args.command](args, _config(args))


if __name__ == "__main__":
    raise SystemExit(main())
