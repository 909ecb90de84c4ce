from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

SOURCES = ("nn", "gnn", "zero_shot")


@dataclass(frozen=True)
class Prediction:
    category_pk: str
    score: float
    rank: int
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown prediction source {self.source!r}")
        if self.rank < 1:
            raise ValueError("rank is 1-based")


def pk_sort_key(pk: str):
    """Numeric-aware ordering for primary keys: '9' < '10', 'c9' < 'c10'."""
    head = pk.rstrip("0123456789")
    tail = pk[len(head):]
    return (head, int(tail) if tail else -1, pk)


def rank_candidates(pks: Sequence[str], scores: Sequence[float], k: int, source: str) -> list[Prediction]:
    """Top-k by descending score; ties go to the smaller primary key."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = sorted(range(len(pks)), key=lambda i: (-float(scores[i]), pk_sort_key(pks[i])))
    return [Prediction(pks[i], float(scores[i]), r + 1, source) for r, i in enumerate(order[:k])]
