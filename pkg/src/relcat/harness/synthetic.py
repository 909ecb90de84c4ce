"""Synthetic small-business ledgers.

Merchants belong to spending concepts; every company names its own category
rows, picks them from a popularity-skewed list of alternatives and sometimes
files a merchant somewhere idiosyncratic. A few merchants only show up late in
a company's timeline so that held-out transactions can land in categories the
company has never used before.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from ..store import CATEGORY, CODE, COMPANY, TRANSACTION, RelationalDatabase, Row, make_database

# concept -> (code name, category name alternatives by popularity, merchants, income?)
CONCEPTS = {
    "meals": ("Meals and Entertainment",
              ["Meals", "Meals & Entertainment", "Business Meals", "Restaurants", "Food and Drink"],
              ["STARBUCKS", "MCDONALDS", "CHIPOTLE MEXICAN GRILL", "PANERA BREAD", "SUBWAY", "DUNKIN DONUTS"],
              False),
    "fuel": ("Car and Truck Expenses",
             ["Fuel", "Gas & Fuel", "Auto: Fuel", "Vehicle Expenses", "Car Expenses"],
             ["SHELL OIL", "CHEVRON", "EXXONMOBIL", "BP PRODUCTS", "SUNOCO", "VALERO ENERGY"],
             False),
    "travel": ("Travel",
               ["Travel", "Airfare", "Business Travel", "Lodging", "Travel Expenses"],
               ["DELTA AIR LINES", "UNITED AIRLINES", "MARRIOTT HOTELS", "HILTON HOTELS", "UBER TRIP", "LYFT RIDE"],
               False),
    "office": ("Office Expenses",
               ["Office Supplies", "Supplies", "Office Expenses", "Supplies & Materials", "Shop Supplies"],
               ["STAPLES", "OFFICE DEPOT", "AMAZON MARKETPLACE", "COSTCO WHOLESALE", "WALMART SUPERCENTER", "TARGET STORES"],
               False),
    "software": ("Software and Subscriptions",
                 ["Software", "Software & Subscriptions", "Dues & Subscriptions", "Computer Expenses", "SaaS Tools"],
                 ["ADOBE SYSTEMS", "MICROSOFT", "GOOGLE WORKSPACE", "DROPBOX", "ZOOM VIDEO COMM", "INTUIT"],
                 False),
    "utilities": ("Utilities",
                  ["Utilities", "Telephone", "Internet & Phone", "Utilities: Electric", "Communications"],
                  ["PACIFIC GAS ELECTRIC", "COMCAST CABLE", "VERIZON WIRELESS", "AT&T MOBILITY", "CON EDISON", "CITY WATER DEPT"],
                  False),
    "advertising": ("Advertising",
                    ["Advertising", "Marketing", "Advertising & Promotion", "Online Ads", "Promotional"],
                    ["FACEBOOK ADS", "GOOGLE ADS", "YELP INC", "LINKEDIN", "VISTAPRINT", "MAILCHIMP"],
                    False),
    "insurance": ("Insurance",
                  ["Insurance", "Business Insurance", "Insurance Expense", "Liability Insurance", "Auto Insurance"],
                  ["STATE FARM", "GEICO", "PROGRESSIVE INS", "ALLSTATE", "HISCOX", "NATIONWIDE"],
                  False),
    "materials": ("Cost of Goods Sold",
                  ["Job Materials", "Materials", "Cost of Goods Sold", "Job Supplies", "Repairs & Maintenance"],
                  ["HOME DEPOT", "LOWES", "ACE HARDWARE", "GRAINGER", "FASTENAL", "MENARDS"],
                  False),
    "income": ("Income",
               ["Sales", "Income", "Services Revenue", "Sales of Product Income", "Revenue"],
               ["STRIPE TRANSFER", "SQUARE INC", "PAYPAL TRANSFER", "SHOPIFY PAYOUT", "CLIENT DEPOSIT", "VENMO CASHOUT"],
               True),
}

GENERIC_NAMES = ["Miscellaneous", "General Expenses", "Other Business Expenses", "Owner Expenses", "Uncategorized Expense"]
GENERIC_CODE = "Other Expenses"

PREFIXES = ["", "", "POS PURCHASE ", "DEBIT CARD ", "CHECKCARD ", "ACH ", "RECURRING PMT ", "PURCHASE AUTH "]
CITIES = ["SAN JOSE CA", "AUSTIN TX", "DENVER CO", "BOSTON MA", "SEATTLE WA", "MIAMI FL", "CHICAGO IL", "PORTLAND OR"]
MEMOS = ["team lunch", "client visit", "monthly plan", "reimbursable", "job site", "q3 invoice", "renewal", "ref"]
NAME_A = ["Bayside", "Summit", "Redwood", "Granite", "Blue Sky", "Maple", "Harbor", "Silver", "Evergreen", "Cedar"]
NAME_B = ["Plumbing", "Consulting", "Bakery", "Landscaping", "Design", "Auto Repair", "Dental", "Studio", "Electric", "Catering"]
NAME_C = ["LLC", "Inc", "Co", "Partners", "Group"]

MERCHANT_CHARS = 25


@dataclass(frozen=True)
class SyntheticConfig:
    num_companies: int = 200
    merchants_per_concept: int = 6
    zipf_exponent: float = 1.1
    transactions_per_company: tuple[int, int] = (60, 140)
    concepts_per_company: tuple[int, int] = (2, 4)
    merchants_per_company: tuple[int, int] = (4, 9)
    abbreviation_noise_rate: float = 0.15
    memo_rate: float = 0.2
    quirk_rate: float = 0.3  # per (company, merchant): filed under a personal category
    late_merchant_rate: float = 0.6  # per company: a merchant that appears only near the end
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.transactions_per_company
        if self.num_companies < 1 or lo < 1 or hi < lo:
            raise ValueError("counts must be >= 1 and ranges ordered")
        if not 1 <= self.merchants_per_concept <= 6:
            raise ValueError("merchants_per_concept must be in [1, 6]")
        for name in ("concepts_per_company", "merchants_per_company"):
            lo_, hi_ = getattr(self, name)
            if lo_ < 1 or hi_ < lo_:
                raise ValueError(f"{name} must be an ordered range >= 1")
        for name in ("abbreviation_noise_rate", "memo_rate", "quirk_rate", "late_merchant_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")

    @property
    def num_merchants(self) -> int:
        return self.merchants_per_concept * len(CONCEPTS)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def merchant_catalogue(config: SyntheticConfig) -> list[tuple[str, str]]:
    """(merchant name, concept) for every merchant in the benchmark."""
    return [(m, concept) for concept, (_, _, merchants, _) in CONCEPTS.items()
            for m in merchants[: config.merchants_per_concept]]


def _abbreviate(word: str, rng: np.random.Generator) -> str:
    if len(word) <= 3:
        return word
    kept = word[0] + "".join(ch for ch in word[1:] if ch not in "AEIOU")
    if len(kept) < 3 or rng.random() < 0.5:
        return word[: max(3, len(word) // 2 + 1)]
    return kept


def describe(merchant: str, rng: np.random.Generator, noise: float) -> str:
    words = merchant.split()
    words = [_abbreviate(w, rng) if rng.random() < noise else w for w in words]
    core = " ".join(words)[:MERCHANT_CHARS].rstrip()
    text = PREFIXES[rng.integers(len(PREFIXES))] + core
    if rng.random() < 0.6:
        text += f" #{rng.integers(1, 9999):04d}"
    if rng.random() < 0.4:
        text += " " + CITIES[rng.integers(len(CITIES))]
    return text


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> RelationalDatabase:
    rng = np.random.default_rng(config.seed)
    concepts = list(CONCEPTS)
    catalogue = merchant_catalogue(config)
    merchant_pop = zipf_weights(len(catalogue), 0.8)[rng.permutation(len(catalogue))]
    base_amount = np.exp(rng.normal(3.5, 1.0, size=len(catalogue)))

    codes = [CONCEPTS[c][0] for c in concepts] + [GENERIC_CODE]
    code_pk = {name: f"k{i + 1}" for i, name in enumerate(codes)}
    code_rows = [Row(code_pk[n], {}, {"name": n}) for n in codes]
    company_rows, category_rows, txn_rows = [], [], []

    for ci in range(config.num_companies):
        company = f"co{ci + 1}"
        name = f"{NAME_A[rng.integers(len(NAME_A))]} {NAME_B[rng.integers(len(NAME_B))]} {NAME_C[rng.integers(len(NAME_C))]}"
        company_rows.append(Row(company, {}, {"name": name}))

        # a business spends in a handful of concepts, with several merchants in each
        n_conc = int(rng.integers(config.concepts_per_company[0], config.concepts_per_company[1] + 1))
        used_concepts = set(rng.choice(concepts, size=min(n_conc, len(concepts)), replace=False).tolist())
        pool = [m for m in range(len(catalogue)) if catalogue[m][1] in used_concepts]
        n_merch = int(rng.integers(config.merchants_per_company[0], config.merchants_per_company[1] + 1))
        n_merch = max(len(used_concepts), min(n_merch, len(pool)))
        p = merchant_pop[pool] / merchant_pop[pool].sum()
        merchants = [int(m) for m in rng.choice(pool, size=n_merch, replace=False, p=p)]
        used_concepts = {catalogue[m][1] for m in merchants}
        late = None
        fresh = [m for m in range(len(catalogue)) if catalogue[m][1] not in used_concepts]
        if fresh and rng.random() < config.late_merchant_rate:
            late = int(fresh[rng.integers(len(fresh))])

        # company-specific naming: one name per concept, occasional personal filing
        concept_name: dict[str, str] = {}
        categories: dict[str, tuple[str, str]] = {}  # name -> (pk, code name)

        def category_for(concept: str) -> str:
            if concept not in concept_name:
                alts = CONCEPTS[concept][1]
                concept_name[concept] = alts[rng.choice(len(alts), p=zipf_weights(len(alts), config.zipf_exponent))]
            return concept_name[concept]

        merchant_cat = {}
        for m in merchants + ([late] if late is not None else []):
            concept = catalogue[m][1]
            if m != late and rng.random() < config.quirk_rate:
                if rng.random() < 0.5 or not concept_name:
                    cat = GENERIC_NAMES[rng.choice(len(GENERIC_NAMES), p=zipf_weights(len(GENERIC_NAMES), config.zipf_exponent))]
                    code = GENERIC_CODE
                else:
                    other = sorted(concept_name)[rng.integers(len(concept_name))]
                    cat, code = concept_name[other], CONCEPTS[other][0]
            else:
                cat, code = category_for(concept), CONCEPTS[concept][0]
            if cat not in categories:
                pk = f"c{len(category_rows) + 1}"
                categories[cat] = (pk, code)
                category_rows.append(Row(pk, {"company_fk": company, "code_fk": code_pk[code]}, {"name": cat}))
            merchant_cat[m] = categories[cat][0]

        lo, hi = config.transactions_per_company
        n_txn = int(rng.integers(lo, hi + 1))
        weights = zipf_weights(len(merchants), 1.0)[rng.permutation(len(merchants))]
        seq = [merchants[i] for i in rng.choice(len(merchants), size=n_txn, p=weights)]
        if late is not None and n_txn >= 4:
            n_late = int(rng.integers(2, min(6, n_txn // 2) + 1))
            tail = max(n_late, n_txn // 10)
            slots = n_txn - tail + np.sort(rng.choice(tail, size=n_late, replace=False))
            for s in slots:
                seq[int(s)] = late

        day = dt.date(2022, 1, 1) + dt.timedelta(days=int(rng.integers(0, 30)))
        for m in seq:
            merchant, concept = catalogue[m]
            income = CONCEPTS[concept][3]
            amount = base_amount[m] * np.exp(rng.normal(0, 0.3))
            amount = round(float(amount if income else -amount), 2)
            if amount == 0:
                amount = 0.01 if income else -0.01
            memo = MEMOS[rng.integers(len(MEMOS))] if rng.random() < config.memo_rate else ""
            txn_rows.append(Row(
                f"t{len(txn_rows) + 1}",
                {"company_fk": company, "category_fk": merchant_cat[m]},
                {"description": describe(merchant, rng, config.abbreviation_noise_rate),
                 "amount": f"{amount:.2f}", "memo": memo, "date": day.isoformat()},
            ))
            day += dt.timedelta(days=int(rng.integers(0, 4)))

    return make_database({TRANSACTION: txn_rows, CATEGORY: category_rows, CODE: code_rows, COMPANY: company_rows})
