import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from xpeffects.errors import (
    InputUnreadable,
    MissingColumn,
    MissingValue,
    SchemaError,
    UnparseableValue,
)
from xpeffects.ingest import ColumnSpec, EncodedTable, Schema, load_table, summarize, write_table

AY = [("a", "treatment"), ("y", "kpi")]


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_lexicographic_codes(tmp_path):
    f = write(tmp_path / "d.csv", "a,y\ntrt,1\nctl,2\ntrt,3\nctl,4\n")
    t = load_table(f, AY)
    assert t.n_rows == 4
    assert t.levels["a"] == ("ctl", "trt")
    assert_array_equal(t.codes["a"], [1, 0, 1, 0])
    assert_array_equal(t.Y[:, 0], [1, 2, 3, 4])


def test_header_only_gives_empty_table(tmp_path):
    t = load_table(write(tmp_path / "d.csv", "a,y\n"), AY)
    assert t.n_rows == 0
    assert t.Y.shape == (0, 1)


def test_blank_cell_names_row_and_column(tmp_path):
    f = write(tmp_path / "d.csv", "a,y\nctl,1\ntrt,\n")
    with pytest.raises(MissingValue) as exc:
        load_table(f, AY)
    assert exc.value.context == {"row": 2, "column": "y"}


def test_short_row_is_missing_value(tmp_path):
    f = write(tmp_path / "d.csv", "a,y\nctl,1\ntrt\n")
    with pytest.raises(MissingValue):
        load_table(f, AY)


def test_unparseable_numeric(tmp_path):
    f = write(tmp_path / "d.csv", "a,y\nctl,1\ntrt,abc\n")
    with pytest.raises(UnparseableValue) as exc:
        load_table(f, AY)
    assert exc.value.context["row"] == 2
    assert exc.value.context["column"] == "y"


@pytest.mark.parametrize("bad", ["nan", "inf", "-Infinity"])
def test_non_finite_rejected(tmp_path, bad):
    f = write(tmp_path / "d.csv", f"a,y\nctl,1\ntrt,{bad}\n")
    with pytest.raises(UnparseableValue):
        load_table(f, AY)


def test_missing_header_column(tmp_path):
    f = write(tmp_path / "d.csv", "a,z\nctl,1\n")
    with pytest.raises(MissingColumn) as exc:
        load_table(f, AY)
    assert exc.value.context["column"] == "y"


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(InputUnreadable) as exc:
        load_table(tmp_path / "nope.csv", AY)
    assert exc.value.exit_code == 2


def test_extra_columns_and_order_ignored(tmp_path):
    f = write(tmp_path / "d.csv", "junk,y,a\nq,1.5,ctl\nr,-0.0,trt\n")
    t = load_table(f, AY)
    assert_array_equal(t.Y[:, 0], [1.5, 0.0])
    assert not np.signbit(t.Y[1, 0])


def test_eligibility_mask(tmp_path):
    f = write(tmp_path / "d.csv", "a,e2,y\nc,1,0\nt1,0,0\nt2,true,0\n")
    schema = [("a", "treatment"), {"name": "e2", "kind": "eligibility", "action": "t2"}, ("y", "kpi")]
    t = load_table(f, schema)
    mask = t.eligibility_mask()
    assert mask.shape == (3, 3)
    assert mask[:, 0].all() and mask[:, 1].all()
    assert_array_equal(mask[:, 2], [True, False, True])


def test_schema_invariants():
    with pytest.raises(SchemaError):
        Schema.from_pairs([("y", "kpi")])
    with pytest.raises(SchemaError):
        Schema.from_pairs([("a", "treatment"), ("b", "treatment"), ("y", "kpi")])
    with pytest.raises(SchemaError):
        Schema.from_pairs([("a", "treatment")])
    with pytest.raises(SchemaError):
        Schema.from_pairs([("a", "treatment"), ("a", "kpi")])
    with pytest.raises(SchemaError):
        Schema.from_pairs([("a", "treatment"), ("y", "kpi"), ("t", "time_period"), ("u", "time_period")])
    with pytest.raises(SchemaError):
        ColumnSpec("e", "eligibility")
    with pytest.raises(SchemaError):
        ColumnSpec("e", "colour")


def test_summarize_d1(d1):
    rep = summarize(d1)
    assert rep.kpi_means == {"y": 3.0}
    assert rep.columns["a"]["cardinality"] == 2
    assert rep.columns["a"]["level_counts"] == {"ctl": 2, "trt": 2}


def test_summarize_three_levels_and_empty(tmp_path):
    t = EncodedTable.from_columns([("a", "treatment"), ("x", "categorical"), ("y", "kpi")],
                                  {"a": ["c", "t", "c"], "x": ["p", "q", "r"], "y": [1, 2, 3]})
    assert summarize(t).columns["x"]["cardinality"] == 3
    empty = load_table(write(tmp_path / "e.csv", "a,y\n"), AY)
    rep = summarize(empty)
    assert rep.n_rows == 0
    assert rep.kpi_means == {"y": None}
    assert rep.columns["a"]["count"] == 0


def test_loading_twice_identical(tmp_path):
    f = write(tmp_path / "d.csv", "a,x,y\nt,2.5,1\nc,1e-3,2\nt,7,3\n")
    schema = [("a", "treatment"), ("x", "numeric"), ("y", "kpi")]
    t1, t2 = load_table(f, schema), load_table(f, schema)
    assert t1.levels == t2.levels
    for k in t1.codes:
        assert t1.codes[k].tobytes() == t2.codes[k].tobytes()
    assert t1.numeric["x"].tobytes() == t2.numeric["x"].tobytes()
    assert t1.Y.tobytes() == t2.Y.tobytes()


def test_arrow_extension(tmp_path):
    pa = pytest.importorskip("pyarrow")
    feather = pytest.importorskip("pyarrow.feather")
    tbl = pa.table({"a": ["trt", "ctl", "ctl"], "y": [1.0, 2.0, 3.5]})
    feather.write_feather(tbl, tmp_path / "d.arrow")
    t = load_table(tmp_path / "d.arrow", AY)
    assert_array_equal(t.codes["a"], [1, 0, 0])
    assert_array_equal(t.Y[:, 0], [1.0, 2.0, 3.5])


labels = st.text(alphabet="abcxyz_-. ", min_size=1, max_size=4).filter(lambda s: s.strip() == s)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(labels, labels, st.floats(-1e6, 1e6, allow_nan=False)), min_size=2, max_size=30))
def test_round_trip_decode(tmp_path_factory, rows):
    a = [r[0] for r in rows]
    if len(set(a)) < 1:
        return
    schema = [("a", "treatment"), ("x", "categorical"), ("y", "kpi")]
    t = EncodedTable.from_columns(schema, {"a": a, "x": [r[1] for r in rows], "y": [r[2] for r in rows]})
    assert list(t.decode("a")) == a
    assert list(t.levels["x"]) == sorted(set(r[1] for r in rows))
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_table(t, path)
    back = load_table(path, schema)
    assert list(back.decode("x")) == [r[1] for r in rows]
    assert back.Y.tobytes() == t.Y.tobytes()
