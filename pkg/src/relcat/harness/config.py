"""Flat ``key = value`` configuration with typed, closed key set."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 7
    # synthetic data
    num_companies: int = 200
    merchants_per_concept: int = 6
    zipf_exponent: float = 1.1
    min_transactions_per_company: int = 60
    max_transactions_per_company: int = 140
    min_concepts_per_company: int = 2
    max_concepts_per_company: int = 4
    min_merchants_per_company: int = 4
    max_merchants_per_company: int = 9
    abbreviation_noise_rate: float = 0.15
    memo_rate: float = 0.2
    quirk_rate: float = 0.5
    late_merchant_rate: float = 0.6
    test_per_company: int = 5
    # tokenizer
    vocab_size: int = 2000
    min_frequency: int = 2
    # encoder
    encoder_layers: int = 6
    encoder_hidden_dim: int = 64
    encoder_heads: int = 4
    encoder_feedforward_dim: int = 256
    max_sequence_length: int = 48
    encoder_batch_size: int = 64
    encoder_learning_rate: float = 1e-3
    encoder_steps: int = 600
    encoder_warmup_fraction: float = 0.1
    learnable_temperature: bool = False
    # gnn
    gnn_hidden_dim: int = 64
    gnn_layers: int = 2
    gnn_attention_dim: int = 32
    gnn_use_gatv2: bool = True
    gnn_edge_similarity: bool = True
    gnn_epochs: int = 300
    gnn_learning_rate: float = 1e-3
    positive_fraction: float = 0.05
    negatives_per_positive: int = 8
    diversity: str = "schedule"
    diversity_statistic: str = "mean"
    diversity_groups: str = "company"
    frequency_smoothing: float = 1.0
    negative_scope: str = "company"
    history_k: int = 16
    # inference
    nn_threshold: float = 0.8
    top_k: int = 5
    candidate_scope: str = "company"

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, kind, raw: str):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, base: Config = Config()) -> Config:
    known = {f.name: f.type for f in fields(Config)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(key, known[key], value)
    return base.replace(**changes)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: Config) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(Config))
