import random

import pytest

from conftest import random_db, tiny_db, txn
from relcat.store import (
    CATEGORY,
    CODE,
    COMPANY,
    FILE_NAMES,
    TRANSACTION,
    IntegrityError,
    LoadError,
    ReferentialIntegrityError,
    Row,
    TableSchema,
    load_database,
    make_database,
    save_database,
    validate,
)


def test_tiny_database_has_four_links(tmp_path):
    save_database(tiny_db(), tmp_path)
    db = load_database(tmp_path)
    assert set(db.tables) == {TRANSACTION, CATEGORY, CODE, COMPANY}
    assert len(db.links) == 4
    assert db.links == {(TRANSACTION, COMPANY), (TRANSACTION, CATEGORY), (CATEGORY, COMPANY), (CATEGORY, CODE)}


def test_links_are_forward_only():
    links = tiny_db().links
    assert not any((b, a) in links for a, b in links)


def test_empty_transaction_table(tmp_path):
    db = tiny_db().replace_table(TRANSACTION, [])
    save_database(db, tmp_path)
    loaded = load_database(tmp_path)
    assert len(loaded[TRANSACTION]) == 0
    assert len(loaded.links) == 4


def test_missing_file_names_table(tmp_path):
    save_database(tiny_db(), tmp_path)
    (tmp_path / FILE_NAMES[CODE]).unlink()
    with pytest.raises(LoadError) as e:
        load_database(tmp_path)
    assert e.value.table == CODE


def test_dangling_fk_lists_offenders(tmp_path):
    db = tiny_db().replace_table(TRANSACTION, [txn("t1", "co1", "c1"), txn("t2", "co1", "nope")])
    save_database(db, tmp_path)
    with pytest.raises(ReferentialIntegrityError) as e:
        load_database(tmp_path)
    assert e.value.offending == [(TRANSACTION, "t2", "category_fk")]


def test_duplicate_pk_is_integrity_error(tmp_path):
    db = tiny_db().replace_table(TRANSACTION, [txn("t1", "co1", "c1"), txn("t1", "co1", "c1")])
    save_database(db, tmp_path)
    with pytest.raises(IntegrityError) as e:
        load_database(tmp_path)
    assert not isinstance(e.value, ReferentialIntegrityError)


def test_validate_examples():
    assert not validate(tiny_db())
    dup = tiny_db().replace_table(TRANSACTION, [txn("t1", "co1", "c1"), txn("t1", "co1", "c1")])
    report = validate(dup)
    assert len(report) == 1 and len(report.of_kind("duplicate_pk")) == 1
    uncategorized = tiny_db().replace_table(TRANSACTION, [txn("t1", "co1", None)])
    assert not validate(uncategorized)


def test_bad_values_reported():
    db = tiny_db().replace_table(TRANSACTION, [txn("t1", "co1", "c1", desc="  "), txn("t2", "co1", "c1", amount="NaN")])
    kinds = [(v.pk, v.column) for v in validate(db).of_kind("bad_value")]
    assert kinds == [("t1", "description"), ("t2", "amount")]


def test_validate_is_idempotent_and_order_independent(rng):
    for _ in range(20):
        db = random_db(rng)
        rows = list(db[TRANSACTION].rows)
        rows.append(txn("dup", "co0", "missing"))
        rows.append(txn("dup", "co0", None))
        db = db.replace_table(TRANSACTION, rows)
        shuffled = rows[:]
        random.Random(3).shuffle(shuffled)
        a = validate(db)
        assert a == validate(db)
        assert a == validate(db.replace_table(TRANSACTION, shuffled))


def test_round_trip_is_byte_exact(tmp_path, rng):
    db = random_db(rng, n_txn=30)
    rows = list(db[TRANSACTION].rows)
    rows[0] = txn("quoted", "co0", None, desc='SAY "HI", FRIEND', memo="line,with,commas")
    db = db.replace_table(TRANSACTION, rows)
    save_database(db, tmp_path / "a")
    loaded = load_database(tmp_path / "a")
    save_database(loaded, tmp_path / "b")
    for name in FILE_NAMES.values():
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert loaded[TRANSACTION].rows[0].attributes["description"] == 'SAY "HI", FRIEND'
    assert loaded[TRANSACTION].rows[0].fkeys["category_fk"] is None


def test_header_mismatch(tmp_path):
    save_database(tiny_db(), tmp_path)
    path = tmp_path / FILE_NAMES[COMPANY]
    path.write_text("id,name\nco1,Acme\n")
    with pytest.raises(LoadError):
        load_database(tmp_path)


def test_schema_rejects_pk_as_fk():
    with pytest.raises(ValueError):
        TableSchema("x", "pk", (("pk", "y"),))


def test_transaction_record_parsing():
    rec = next(tiny_db().transactions())
    assert rec.category_fk == "c1" and str(rec.amount) == "-4.50"
    db = make_database({COMPANY: [Row("co1", {}, {"name": "A"})]})
    assert len(db[TRANSACTION]) == 0
