"""Four-table relational store: transactions, categories, codes, companies.

The store is a thin, immutable-after-load container. Every attribute is kept
as the exact string read from disk so that ``save_database(load_database(d))``
reproduces the files byte for byte; numeric parsing happens downstream.
"""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

TRANSACTION = "transaction"
CATEGORY = "category"
CODE = "code"
COMPANY = "company"

TABLE_ORDER = (TRANSACTION, CATEGORY, CODE, COMPANY)

FILE_NAMES = {
    TRANSACTION: "transactions.csv",
    CATEGORY: "categories.csv",
    CODE: "codes.csv",
    COMPANY: "companies.csv",
}


class StoreError(Exception):
    """Base class for relational-store failures."""


class LoadError(StoreError):
    def __init__(self, table: str, message: str):
        super().__init__(f"{table}: {message}")
        self.table = table


class IntegrityError(StoreError):
    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        lines = "; ".join(v.describe() for v in self.violations[:10])
        more = "" if len(self.violations) <= 10 else f" (+{len(self.violations) - 10} more)"
        super().__init__(f"{len(self.violations)} integrity violation(s): {lines}{more}")


class ReferentialIntegrityError(IntegrityError):
    """Raised when a foreign key names a primary key that does not exist.

    ``offending`` lists ``(table, pk, column)`` triples.
    """

    @property
    def offending(self) -> list[tuple[str, str, str]]:
        return [(v.table, v.pk, v.column or "") for v in self.violations]


@dataclass(frozen=True)
class TableSchema:
    name: str
    primary_key: str
    foreign_keys: tuple[tuple[str, str], ...] = ()
    attribute_columns: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.primary_key in {col for col, _ in self.foreign_keys}:
            raise ValueError(f"{self.name}: primary key {self.primary_key!r} listed as foreign key")
        for col, kind in self.attribute_columns:
            if kind not in ("text", "decimal", "date"):
                raise ValueError(f"{self.name}.{col}: unknown attribute kind {kind!r}")

    @property
    def columns(self) -> list[str]:
        return (
            [self.primary_key]
            + [col for col, _ in self.foreign_keys]
            + [col for col, _ in self.attribute_columns]
        )


SCHEMAS: dict[str, TableSchema] = {
    TRANSACTION: TableSchema(
        TRANSACTION,
        "pk",
        (("company_fk", COMPANY), ("category_fk", CATEGORY)),
        (("description", "text"), ("amount", "decimal"), ("memo", "text"), ("date", "date")),
    ),
    CATEGORY: TableSchema(
        CATEGORY,
        "pk",
        (("company_fk", COMPANY), ("code_fk", CODE)),
        (("name", "text"),),
    ),
    CODE: TableSchema(CODE, "pk", (), (("name", "text"),)),
    COMPANY: TableSchema(COMPANY, "pk", (), (("name", "text"),)),
}


@dataclass(frozen=True)
class Row:
    pk: str
    fkeys: Mapping[str, str | None] = field(default_factory=dict)
    attributes: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Table:
    schema: TableSchema
    rows: tuple[Row, ...] = ()

    def __len__(self) -> int:
        return len(self.rows)

    def index_of(self) -> dict[str, int]:
        """pk -> row position. Later duplicates do not overwrite earlier ones."""
        out: dict[str, int] = {}
        for i, row in enumerate(self.rows):
            out.setdefault(row.pk, i)
        return out


@dataclass(frozen=True)
class TransactionRecord:
    pk: str
    company_fk: str
    category_fk: str | None
    description: str
    amount: Decimal
    memo: str = ""
    date: str = ""


@dataclass(frozen=True)
class Violation:
    kind: str  # "duplicate_pk" | "dangling_fk" | "missing_table" | "bad_value"
    table: str
    pk: str = ""
    column: str | None = None
    detail: str = ""

    def describe(self) -> str:
        where = f"{self.table}[{self.pk}]" + (f".{self.column}" if self.column else "")
        return f"{self.kind} at {where}" + (f" ({self.detail})" if self.detail else "")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def of_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]


@dataclass(frozen=True)
class RelationalDatabase:
    tables: Mapping[str, Table]

    @property
    def links(self) -> frozenset[tuple[str, str]]:
        """(fkey table, pkey table) pairs, forward direction only."""
        return frozenset(
            (name, target)
            for name, table in self.tables.items()
            for _, target in table.schema.foreign_keys
        )

    def __getitem__(self, name: str) -> Table:
        return self.tables[name]

    def transactions(self) -> Iterator[TransactionRecord]:
        for row in self.tables[TRANSACTION].rows:
            yield as_transaction(row)

    def replace_table(self, name: str, rows: Iterable[Row]) -> "RelationalDatabase":
        tables = dict(self.tables)
        tables[name] = Table(self.tables[name].schema, tuple(rows))
        return RelationalDatabase(tables)


def as_transaction(row: Row) -> TransactionRecord:
    a = row.attributes
    return TransactionRecord(
        pk=row.pk,
        company_fk=row.fkeys.get("company_fk") or "",
        category_fk=row.fkeys.get("category_fk"),
        description=a.get("description", ""),
        amount=Decimal(a.get("amount", "0") or "0"),
        memo=a.get("memo", ""),
        date=a.get("date", ""),
    )


def make_database(rows: Mapping[str, Iterable[Row]]) -> RelationalDatabase:
    """Assemble a database with the canonical schemas; missing tables are empty."""
    return RelationalDatabase(
        {name: Table(SCHEMAS[name], tuple(rows.get(name, ()))) for name in TABLE_ORDER}
    )


def validate(db: RelationalDatabase) -> ValidationReport:
    violations: list[Violation] = []
    for name in TABLE_ORDER:
        if name not in db.tables:
            violations.append(Violation("missing_table", name))
    pk_sets = {name: {row.pk for row in table.rows} for name, table in db.tables.items()}

    for name in sorted(db.tables, key=_table_rank):
        table = db.tables[name]
        counts = Counter(row.pk for row in table.rows)
        for pk in sorted(pk for pk, n in counts.items() if n > 1):
            violations.append(Violation("duplicate_pk", name, pk, table.schema.primary_key,
                                        f"{counts[pk]} rows"))
        for col, target in table.schema.foreign_keys:
            if target not in db.tables:
                violations.append(Violation("missing_table", target, detail=f"referenced by {name}.{col}"))
                continue
            targets = pk_sets[target]
            for row in table.rows:
                ref = row.fkeys.get(col)
                if ref is not None and ref not in targets:
                    violations.append(Violation("dangling_fk", name, row.pk, col, f"-> {target}[{ref}]"))
        if name == TRANSACTION:
            for row in table.rows:
                if not row.attributes.get("description", "").strip():
                    violations.append(Violation("bad_value", name, row.pk, "description", "empty"))
                try:
                    amount = Decimal(row.attributes.get("amount", ""))
                    if amount.is_nan() or amount.is_infinite():
                        raise InvalidOperation
                except InvalidOperation:
                    violations.append(Violation("bad_value", name, row.pk, "amount",
                                                repr(row.attributes.get("amount"))))
                if not row.fkeys.get("company_fk"):
                    violations.append(Violation("bad_value", name, row.pk, "company_fk", "null"))

    # sorted so the report does not depend on row order
    violations.sort(key=lambda v: (v.kind, _table_rank(v.table), v.pk, v.column or "", v.detail))
    return ValidationReport(tuple(violations))


def _table_rank(name: str) -> tuple[int, str]:
    return (TABLE_ORDER.index(name) if name in TABLE_ORDER else len(TABLE_ORDER), name)


def load_database(directory: str | Path) -> RelationalDatabase:
    directory = Path(directory)
    rows: dict[str, list[Row]] = {}
    for name in TABLE_ORDER:
        path = directory / FILE_NAMES[name]
        if not path.is_file():
            raise LoadError(name, f"missing file {path}")
        rows[name] = _read_table(SCHEMAS[name], path.read_text(encoding="utf-8"))
    db = make_database(rows)
    report = validate(db)
    dangling = report.of_kind("dangling_fk")
    if dangling:
        raise ReferentialIntegrityError(dangling)
    if report:
        raise IntegrityError(report.violations)
    return db


def _read_table(schema: TableSchema, text: str) -> list[Row]:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise LoadError(schema.name, "empty file (header required)") from None
    if header != schema.columns:
        raise LoadError(schema.name, f"header {header} != expected {schema.columns}")
    fk_cols = [col for col, _ in schema.foreign_keys]
    attr_cols = [col for col, _ in schema.attribute_columns]
    out = []
    for lineno, record in enumerate(reader, start=2):
        if len(record) != len(header):
            raise LoadError(schema.name, f"line {lineno}: {len(record)} fields, expected {len(header)}")
        values = dict(zip(header, record))
        out.append(Row(
            pk=values[schema.primary_key],
            fkeys={col: (values[col] or None) for col in fk_cols},
            attributes={col: values[col] for col in attr_cols},
        ))
    return out


def save_database(db: RelationalDatabase, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in TABLE_ORDER:
        table = db.tables[name]
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(table.schema.columns)
        for row in table.rows:
            writer.writerow(
                [row.pk]
                + [row.fkeys.get(col) or "" for col, _ in table.schema.foreign_keys]
                + [row.attributes.get(col, "") for col, _ in table.schema.attribute_columns]
            )
        (directory / FILE_NAMES[name]).write_text(buf.getvalue(), encoding="utf-8", newline="")
