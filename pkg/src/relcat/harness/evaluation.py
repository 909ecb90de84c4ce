"""Temporal train/test split and Top-k / seen-vs-unseen scoring."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Collection, Mapping, Sequence

from ..prediction import Prediction
from ..store import TRANSACTION, RelationalDatabase, Row, TransactionRecord, as_transaction

log = logging.getLogger(__name__)


def temporal_split(db: RelationalDatabase, per_company_test_n: int) -> tuple[RelationalDatabase, list[TransactionRecord]]:
    """Withhold each company's ``n`` most recent labeled transactions.

    The withheld rows stay in the returned database as uncategorized
    transactions; their labels travel only in the returned test records.
    """
    if per_company_test_n < 0:
        raise ValueError("per_company_test_n must be >= 0")
    rows = db[TRANSACTION].rows
    by_company: dict[str, list[int]] = defaultdict(list)
    for i, row in enumerate(rows):
        if row.fkeys.get("category_fk"):
            by_company[row.fkeys["company_fk"]].append(i)
    held: set[int] = set()
    if per_company_test_n:
        for company, idx in sorted(by_company.items()):
            if len(idx) <= per_company_test_n:
                log.warning("company %s has %d labeled transactions; excluded from test", company, len(idx))
                continue
            idx.sort(key=lambda i: (rows[i].attributes.get("date", ""), i))
            held.update(idx[-per_company_test_n:])
    test = [as_transaction(rows[i]) for i in sorted(held)]
    new_rows = [
        Row(r.pk, {**r.fkeys, "category_fk": None}, r.attributes) if i in held else r
        for i, r in enumerate(rows)
    ]
    return db.replace_table(TRANSACTION, new_rows), test


def company_histories(train_db: RelationalDatabase) -> dict[str, set[str]]:
    """Company pk -> category pks linked by its training-period transactions."""
    out: dict[str, set[str]] = defaultdict(set)
    for t in train_db.transactions():
        if t.category_fk:
            out[t.company_fk].add(t.category_fk)
    return dict(out)


@dataclass(frozen=True)
class EvalReport:
    top1: float
    top2: float
    top5: float
    n: int
    hs_accuracy: float | None
    hu_accuracy: float | None
    hs_count: int
    hu_count: int
    cascade: Mapping[int, float] | None = field(default=None)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("top1", "top2", "top5", "n", "hs_accuracy", "hu_accuracy",
                                           "hs_count", "hu_count")}
        if self.cascade is not None:
            d["cascade"] = {str(k): v for k, v in self.cascade.items()}
        return d

    def summary(self, name: str = "") -> str:
        fmt = lambda v: "  n/a " if v is None else f"{100 * v:6.2f}"
        return (f"{name:<22} top1 {fmt(self.top1)}  top2 {fmt(self.top2)}  top5 {fmt(self.top5)}  "
                f"HS {fmt(self.hs_accuracy)} (n={self.hs_count})  HU {fmt(self.hu_accuracy)} (n={self.hu_count})")


def _pks(preds: Sequence[Prediction] | Sequence[str]) -> list[str]:
    return [p.category_pk if isinstance(p, Prediction) else p for p in preds]


def evaluate(
    predictions: Mapping[str, Sequence[Prediction] | Sequence[str]],
    ground_truth: Mapping[str, str],
    histories: Mapping[str, Collection[str]],
    cascade: Mapping[int, float] | None = None,
) -> EvalReport:
    """Score ranked predictions.

    ``histories`` maps each test transaction pk to the category pks seen in its
    company's training period; a case is "seen" when the truth is among them.
    Seen/unseen accuracies are Top-1, so ``top1`` is their count-weighted mean.
    """
    if set(predictions) != set(ground_truth):
        missing = sorted(set(ground_truth) - set(predictions))[:5]
        extra = sorted(set(predictions) - set(ground_truth))[:5]
        raise KeyError(f"prediction/truth key mismatch: missing {missing}, unexpected {extra}")
    if not ground_truth:
        raise ValueError("nothing to evaluate")
    hits = {1: 0, 2: 0, 5: 0}
    seen = [0, 0]
    unseen = [0, 0]
    for pk, truth in ground_truth.items():
        ranked = _pks(predictions[pk])
        for k in hits:
            hits[k] += truth in ranked[:k]
        bucket = seen if truth in histories.get(pk, ()) else unseen
        bucket[0] += ranked[:1] == [truth]
        bucket[1] += 1
    n = len(ground_truth)
    return EvalReport(
        top1=hits[1] / n, top2=hits[2] / n, top5=hits[5] / n, n=n,
        hs_accuracy=seen[0] / seen[1] if seen[1] else None,
        hu_accuracy=unseen[0] / unseen[1] if unseen[1] else None,
        hs_count=seen[1], hu_count=unseen[1], cascade=cascade,
    )
