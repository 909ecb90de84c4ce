"""Transaction sentence encoder: a small transformer with mean pooling, trained
as a Siamese pair matcher with a symmetric in-batch cross-entropy over cosine
similarities.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from decimal import Decimal
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .prediction import Prediction, rank_candidates
from .store import TransactionRecord
from .tokenizer import Vocab, tokenize

log = logging.getLogger(__name__)


class EncoderTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 6
    hidden_dim: int = 64
    attention_heads: int = 4
    feedforward_dim: int = 256
    max_sequence_length: int = 48
    dropout: float = 0.0
    learnable_temperature: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.attention_heads:
            raise ValueError("hidden_dim must be divisible by attention_heads")
        if self.max_sequence_length < 8:
            raise ValueError("max_sequence_length must be >= 8")
        if self.vocab_size < 5:
            raise ValueError("vocab_size too small")

    @property
    def embedding_dim(self) -> int:
        return self.hidden_dim


@dataclass(frozen=True)
class EncoderHyperparams:
    batch_size: int = 64
    learning_rate: float = 1e-4
    warmup_fraction: float = 0.1
    steps: int = 1000
    weight_decay: float = 0.01
    unique_labels: bool = True  # no repeated category text inside a batch


class TxnEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.token_embedding = nn.Embedding(config.vocab_size, d, padding_idx=0)
        self.position_embedding = nn.Embedding(config.max_sequence_length, d)
        layer = nn.TransformerEncoderLayer(
            d, config.attention_heads, config.feedforward_dim, config.dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.final_norm = nn.LayerNorm(d)
        if config.learnable_temperature:
            self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
        self.reset_parameters()

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if name == "logit_scale":
                continue
            if p.dim() > 1:
                nn.init.normal_(p, std=0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
        with torch.no_grad():
            self.token_embedding.weight[0].zero_()

    def token_states(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None]
        x = self.blocks(x, src_key_padding_mask=~mask)
        return self.final_norm(x)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        states = self.token_states(ids, mask)
        m = mask.unsqueeze(-1).to(states.dtype)
        return (states * m).sum(1) / m.sum(1).clamp_min(1.0)

    @property
    def scale(self) -> torch.Tensor | float:
        return self.logit_scale.exp() if self.config.learnable_temperature else 1.0


def format_transaction(txn: TransactionRecord) -> str:
    amount = Decimal(txn.amount)
    polarity = "paid" if amount < 0 else "received"
    text = f"Transaction {polarity} ${abs(amount):.2f} for: {txn.description}"
    if txn.memo:
        text += f" {txn.memo}"
    return text


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    truncated = 0
    rows = []
    for s in seqs:
        if len(s) > max_len:
            truncated += 1
            s = list(s[: max_len - 1]) + [s[-1]]  # keep the closing [SEP]
        rows.append(s)
    if truncated:
        log.info("truncated %d of %d sequences to %d tokens", truncated, len(seqs), max_len)
    width = max(len(s) for s in rows)
    ids = torch.zeros((len(rows), width), dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, s in enumerate(rows):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


@torch.no_grad()
def encode(model: TxnEncoder, vocab: Vocab, texts: Sequence[str], batch_size: int = 256) -> torch.Tensor:
    if not texts:
        raise ValueError("texts must be non-empty")
    was_training = model.training
    model.eval()
    # repeated texts are encoded once, so duplicates get bitwise-equal rows
    unique = list(dict.fromkeys(texts))
    slot = {t: i for i, t in enumerate(unique)}
    seqs = [tokenize(vocab, t) for t in unique]
    # length-sorted batches keep padding small; results are scattered back
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    out = torch.empty((len(seqs), model.config.embedding_dim))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        ids, mask = pad_batch([seqs[i] for i in idx], model.config.max_sequence_length)
        out[torch.tensor(idx)] = model(ids, mask).float()
    model.train(was_training)
    return out[torch.tensor([slot[t] for t in texts])]


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=1), b.norm(dim=1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    return (a / na[:, None]) @ (b / nb[:, None]).t()


def clip_loss(txn_embs: torch.Tensor, cat_embs: torch.Tensor, scale: float | torch.Tensor = 1.0) -> torch.Tensor:
    """Mean over pairs of the row-wise plus column-wise softmax cross-entropy at the diagonal."""
    if txn_embs.shape[0] != cat_embs.shape[0] or txn_embs.shape[0] < 1:
        raise ValueError("need equal, non-zero row counts")
    sim = cosine_matrix(txn_embs, cat_embs) * scale
    diag = torch.arange(sim.shape[0])
    row = F.log_softmax(sim, dim=1)[diag, diag]
    col = F.log_softmax(sim, dim=0)[diag, diag]
    return -(row + col).mean()


def _lr_at(step: int, total: int, base: float, warmup_fraction: float) -> float:
    warm = max(1, int(round(warmup_fraction * total)))
    if step < warm:
        return base * (step + 1) / warm
    return base * max(0.0, (total - step) / max(1, total - warm))


def train_encoder(
    pairs: Sequence[tuple[str, str]],
    vocab: Vocab,
    config: EncoderConfig,
    hyperparams: EncoderHyperparams = EncoderHyperparams(),
    seed: int = 0,
    on_step: Callable[[dict], None] | None = None,
) -> TxnEncoder:
    labels = sorted({c for _, c in pairs})
    if len(labels) < 2:
        raise ValueError("need at least two distinct categories for a contrastive signal")
    torch.manual_seed(seed)
    model = TxnEncoder(config)
    if hyperparams.steps == 0:
        return model
    rng = np.random.default_rng(seed)

    txn_seqs = [tokenize(vocab, t) for t, _ in pairs]
    label_ids = {c: i for i, c in enumerate(labels)}
    label_seqs = [tokenize(vocab, c) for c in labels]
    pair_label = np.array([label_ids[c] for _, c in pairs])
    by_label = [np.flatnonzero(pair_label == i) for i in range(len(labels))]
    label_freq = np.array([len(b) for b in by_label], dtype=float)
    label_freq /= label_freq.sum()

    opt = torch.optim.AdamW(model.parameters(), lr=hyperparams.learning_rate,
                            weight_decay=hyperparams.weight_decay)
    model.train()
    for step in range(hyperparams.steps):
        if hyperparams.unique_labels:
            m = min(hyperparams.batch_size, len(labels))
            chosen = rng.choice(len(labels), size=m, replace=False, p=label_freq)
            batch = np.array([rng.choice(by_label[c]) for c in chosen])
        else:
            batch = rng.choice(len(pairs), size=min(hyperparams.batch_size, len(pairs)), replace=False)
        lr = _lr_at(step, hyperparams.steps, hyperparams.learning_rate, hyperparams.warmup_fraction)
        for group in opt.param_groups:
            group["lr"] = lr
        t_ids, t_mask = pad_batch([txn_seqs[i] for i in batch], config.max_sequence_length)
        c_ids, c_mask = pad_batch([label_seqs[pair_label[i]] for i in batch], config.max_sequence_length)
        loss = clip_loss(model(t_ids, t_mask), model(c_ids, c_mask), model.scale)
        if not torch.isfinite(loss):
            raise EncoderTrainingError(
                f"non-finite loss at step {step} (lr={lr:.3g}, batch pairs={batch[:8].tolist()}...)")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_step is not None:
            on_step({"step": step, "loss": loss.item(), "lr": lr, "batch": len(batch), "seed": seed})
    model.eval()
    return model


@torch.no_grad()
def in_batch_accuracy(model: TxnEncoder, vocab: Vocab, pairs: Sequence[tuple[str, str]]) -> float:
    """Fraction of rows whose most similar category text is its own."""
    t = encode(model, vocab, [p[0] for p in pairs])
    c = encode(model, vocab, [p[1] for p in pairs])
    sim = cosine_matrix(t, c)
    return float((sim.argmax(1) == torch.arange(len(pairs))).float().mean())


@torch.no_grad()
def zero_shot_rank(
    model: TxnEncoder,
    vocab: Vocab,
    txn: TransactionRecord | str,
    categories: Sequence[tuple[str, str]],
    k: int = 5,
    category_embeddings: torch.Tensor | None = None,
) -> list[Prediction]:
    """Rank ``(category_pk, name)`` candidates by cosine similarity to the transaction text."""
    if not categories:
        raise ValueError("no candidate categories")
    text = txn if isinstance(txn, str) else format_transaction(txn)
    t = encode(model, vocab, [text])
    c = category_embeddings if category_embeddings is not None else encode(model, vocab, [n for _, n in categories])
    sims = cosine_matrix(t, c)[0]
    return rank_candidates([pk for pk, _ in categories], sims.tolist(), k, "zero_shot")
