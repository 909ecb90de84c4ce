import numpy as np
import pytest
import torch

from relcat.store import CATEGORY, CODE, COMPANY, TRANSACTION, Row, make_database


def txn(pk, company, category, desc="COFFEE SHOP", amount="-4.50", memo="", date="2023-01-01"):
    return Row(pk, {"company_fk": company, "category_fk": category},
               {"description": desc, "amount": amount, "memo": memo, "date": date})


def tiny_db():
    """One company, one code, one category, one transaction."""
    return make_database({
        COMPANY: [Row("co1", {}, {"name": "Acme"})],
        CODE: [Row("k1", {}, {"name": "Meals"})],
        CATEGORY: [Row("c1", {"company_fk": "co1", "code_fk": "k1"}, {"name": "Meals"})],
        TRANSACTION: [txn("t1", "co1", "c1")],
    })


def random_db(rng: np.random.Generator, n_companies=None, n_txn=None, null_rate=0.3):
    n_companies = n_companies or int(rng.integers(1, 4))
    n_codes = int(rng.integers(1, 3))
    companies = [Row(f"co{i}", {}, {"name": f"Company {i}"}) for i in range(n_companies)]
    codes = [Row(f"k{i}", {}, {"name": f"Code {i}"}) for i in range(n_codes)]
    cats = []
    for i in range(int(rng.integers(1, 6))):
        cats.append(Row(f"c{i}", {"company_fk": f"co{rng.integers(n_companies)}",
                                  "code_fk": f"k{rng.integers(n_codes)}" if rng.random() > 0.2 else None},
                        {"name": f"Category {i % 3}"}))
    txns = []
    for i in range(n_txn if n_txn is not None else int(rng.integers(0, 25))):
        cat = f"c{rng.integers(len(cats))}" if rng.random() > null_rate else None
        txns.append(txn(f"t{i}", f"co{rng.integers(n_companies)}", cat,
                        desc=f"MERCHANT {rng.integers(5)}", amount=f"{rng.normal() * 50:.2f}",
                        date=f"2023-01-{1 + int(rng.integers(28)):02d}"))
    return make_database({COMPANY: companies, CODE: codes, CATEGORY: cats, TRANSACTION: txns})


def random_features(db, dim=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return {name: torch.randn(len(db[name]), dim, generator=g) for name in (TRANSACTION, CATEGORY, CODE, COMPANY)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` (float64)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f(x).item()
        flat[i] = old - eps
        lo = f(x).item()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def fk_pairs_count(db) -> int:
    """Brute-force count of non-null foreign-key cells."""
    return sum(1 for table in db.tables.values() for row in table.rows
               for col, _ in table.schema.foreign_keys if row.fkeys.get(col) is not None)
