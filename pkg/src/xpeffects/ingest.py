"""Load experiment data into typed, encoded columns.

Rows go straight from the file into float64 arrays and integer category
codes; there is no dataframe in between.  Categorical level dictionaries are
sorted lexicographically so code 0 is always the lexicographically first
level (the reference level of one-hot encodings downstream).
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    InputUnreadable,
    MissingColumn,
    MissingValue,
    SchemaError,
    UnknownColumn,
    UnparseableValue,
)

KINDS = (
    "numeric",
    "categorical",
    "treatment",
    "unit_id",
    "time_period",
    "cluster_id",
    "kpi",
    "instrument",
    "eligibility",
)
CATEGORICAL_KINDS = frozenset(
    {"categorical", "treatment", "unit_id", "time_period", "cluster_id", "instrument"}
)
_SINGLETON_KINDS = ("treatment", "time_period", "cluster_id", "unit_id")
_TRUE = frozenset({"1", "true", "t", "yes", "y"})
_FALSE = frozenset({"0", "false", "f", "no", "n"})


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    # eligibility columns name the treatment level they gate
    action: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r}", column=self.name)
        if self.kind == "eligibility" and self.action is None:
            raise SchemaError(
                "eligibility column needs an 'action' level", column=self.name
            )


@dataclass(frozen=True)
class Schema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema", columns=names)
        kinds = [c.kind for c in self.columns]
        if kinds.count("treatment") != 1:
            raise SchemaError("schema needs exactly one treatment column")
        if kinds.count("kpi") < 1:
            raise SchemaError("schema needs at least one kpi column")
        for kind in _SINGLETON_KINDS[1:]:
            if kinds.count(kind) > 1:
                raise SchemaError(f"at most one {kind} column allowed")

    @classmethod
    def from_pairs(cls, pairs: Iterable) -> "Schema":
        """Build from ``(name, kind)`` tuples or ``{"name", "kind", "action"}`` dicts."""
        cols = []
        for item in pairs:
            if isinstance(item, Mapping):
                unknown = set(item) - {"name", "kind", "action"}
                if unknown:
                    raise SchemaError(f"unknown schema keys {sorted(unknown)}")
                cols.append(ColumnSpec(item["name"], item["kind"], item.get("action")))
            else:
                cols.append(ColumnSpec(*item))
        return cls(tuple(cols))

    def __getitem__(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise UnknownColumn(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def names_of(self, kind: str) -> list[str]:
        return [c.name for c in self.columns if c.kind == kind]

    def single(self, kind: str) -> str | None:
        names = self.names_of(kind)
        return names[0] if names else None

    @property
    def treatment(self) -> str:
        return self.names_of("treatment")[0]

    @property
    def kpis(self) -> list[str]:
        return self.names_of("kpi")


@dataclass(frozen=True, eq=False)
class EncodedTable:
    """Immutable columnar table.

    ``codes``/``levels`` hold every categorical-like column (treatment,
    categorical covariates, ids, periods, instruments); ``numeric`` holds
    float64 covariates; ``Y`` is the ``n_rows x m`` KPI matrix.
    """

    schema: Schema
    n_rows: int
    numeric: dict[str, np.ndarray]
    codes: dict[str, np.ndarray]
    levels: dict[str, tuple[str, ...]]
    Y: np.ndarray
    eligible: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def treatment(self) -> str:
        return self.schema.treatment

    @property
    def kpi_names(self) -> tuple[str, ...]:
        return tuple(self.schema.kpis)

    def kind(self, name: str) -> str:
        return self.schema[name].kind

    def is_categorical(self, name: str) -> bool:
        return name in self.codes

    def level_code(self, column: str, level: str) -> int:
        try:
            return self.levels[column].index(str(level))
        except ValueError:
            raise SchemaError(
                f"level {level!r} not present in column {column!r}",
                column=column, level=str(level),
            ) from None

    def decode(self, column: str) -> np.ndarray:
        return np.asarray(self.levels[column], dtype=object)[self.codes[column]]

    def take(self, rows: np.ndarray) -> "EncodedTable":
        """Row subset (a copy) keeping level dictionaries intact."""
        rows = np.asarray(rows)
        n = int(rows.sum()) if rows.dtype == bool else len(rows)
        return EncodedTable(
            schema=self.schema,
            n_rows=n,
            numeric={k: v[rows] for k, v in self.numeric.items()},
            codes={k: v[rows] for k, v in self.codes.items()},
            levels=self.levels,
            Y=self.Y[rows],
            eligible={k: v[rows] for k, v in self.eligible.items()},
        )

    def with_codes(self, column: str, codes: np.ndarray) -> "EncodedTable":
        new_codes = dict(self.codes)
        new_codes[column] = np.broadcast_to(
            np.asarray(codes, dtype=np.int64), (self.n_rows,)
        )
        return EncodedTable(
            self.schema, self.n_rows, self.numeric, new_codes, self.levels, self.Y,
            self.eligible,
        )

    def with_kpis(self, Y: np.ndarray) -> "EncodedTable":
        Y = np.asarray(Y, dtype=np.float64).reshape(self.n_rows, -1)
        return EncodedTable(
            self.schema, self.n_rows, self.numeric, self.codes, self.levels, Y,
            self.eligible,
        )

    def eligibility_mask(self) -> np.ndarray:
        """``n_rows x K`` boolean mask over treatment levels; control is always eligible."""
        levels = self.levels[self.treatment]
        mask = np.ones((self.n_rows, len(levels)), dtype=bool)
        for spec in self.schema.columns:
            if spec.kind != "eligibility":
                continue
            k = self.level_code(self.treatment, spec.action)
            if k == 0:
                continue
            mask[:, k] &= self.eligible[spec.name]
        return mask

    @classmethod
    def from_codes(
        cls,
        schema: Schema | Iterable,
        *,
        codes: Mapping[str, np.ndarray] | None = None,
        levels: Mapping[str, Sequence[str]] | None = None,
        numeric: Mapping[str, np.ndarray] | None = None,
        kpis: Mapping[str, np.ndarray] | None = None,
        eligible: Mapping[str, np.ndarray] | None = None,
    ) -> "EncodedTable":
        """Assemble a table from pre-encoded arrays (synthetic data, tests).

        Level tuples must already be sorted and codes must index into them.
        """
        if not isinstance(schema, Schema):
            schema = Schema.from_pairs(schema)
        codes = dict(codes or {})
        levels = {k: tuple(str(x) for x in v) for k, v in (levels or {}).items()}
        numeric = dict(numeric or {})
        kpis = dict(kpis or {})
        eligible = dict(eligible or {})
        n = None
        out_codes, out_num, out_elig = {}, {}, {}
        for spec in schema.columns:
            if spec.kind in CATEGORICAL_KINDS:
                if spec.name not in codes or spec.name not in levels:
                    raise MissingColumn(spec.name)
                lv = levels[spec.name]
                if list(lv) != sorted(lv) or len(set(lv)) != len(lv):
                    raise SchemaError("levels must be unique and sorted", column=spec.name)
                arr = np.ascontiguousarray(codes[spec.name], dtype=np.int64)
                if arr.size and (arr.min() < 0 or arr.max() >= len(lv)):
                    raise SchemaError("code out of range", column=spec.name)
                out_codes[spec.name] = arr
            elif spec.kind == "numeric":
                if spec.name not in numeric:
                    raise MissingColumn(spec.name)
                arr = np.ascontiguousarray(numeric[spec.name], dtype=np.float64) + 0.0
                out_num[spec.name] = arr
            elif spec.kind == "kpi":
                if spec.name not in kpis:
                    raise MissingColumn(spec.name)
                arr = np.asarray(kpis[spec.name], dtype=np.float64)
            else:
                if spec.name not in eligible:
                    raise MissingColumn(spec.name)
                arr = np.ascontiguousarray(eligible[spec.name], dtype=bool)
                out_elig[spec.name] = arr
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise SchemaError("columns differ in length", column=spec.name)
        Y = np.column_stack([np.asarray(kpis[k], dtype=np.float64) for k in schema.kpis])
        return cls(
            schema=schema,
            n_rows=int(n or 0),
            numeric=out_num,
            codes=out_codes,
            levels={k: levels[k] for k in out_codes},
            Y=np.ascontiguousarray(Y.reshape(int(n or 0), len(schema.kpis))),
            eligible=out_elig,
        )

    @classmethod
    def from_columns(cls, schema: Schema | Iterable, columns: Mapping[str, Sequence]) -> "EncodedTable":
        """Encode raw (string or numeric) columns exactly as :func:`load_table` does."""
        if not isinstance(schema, Schema):
            schema = Schema.from_pairs(schema)
        raw = {}
        for spec in schema.columns:
            if spec.name not in columns:
                raise MissingColumn(spec.name)
            raw[spec.name] = ["" if v is None else str(v) for v in columns[spec.name]]
        return _encode(schema, raw)


def _parse_float(values: list[str], name: str) -> np.ndarray:
    try:
        arr = np.array(values, dtype=np.float64)
    except ValueError:
        arr = None
    if arr is not None and np.isfinite(arr).all():
        return arr + 0.0  # folds -0.0 into 0.0
    for i, v in enumerate(values):
        try:
            x = float(v)
        except ValueError:
            raise UnparseableValue(i + 1, name, v) from None
        if not math.isfinite(x):
            raise UnparseableValue(i + 1, name, v)
    raise AssertionError("unreachable")  # pragma: no cover


def _parse_bool(values: list[str], name: str) -> np.ndarray:
    out = np.empty(len(values), dtype=bool)
    for i, v in enumerate(values):
        low = v.lower()
        if low in _TRUE:
            out[i] = True
        elif low in _FALSE:
            out[i] = False
        else:
            raise UnparseableValue(i + 1, name, v)
    return out


def _encode(schema: Schema, raw: dict[str, list[str]]) -> EncodedTable:
    n = len(next(iter(raw.values()))) if raw else 0
    for spec in schema.columns:
        values = raw[spec.name]
        for i, v in enumerate(values):
            if v.strip() == "":
                raise MissingValue(i + 1, spec.name)
    numeric, codes, levels, eligible, kpis = {}, {}, {}, {}, {}
    for spec in schema.columns:
        values = raw[spec.name]
        if spec.kind in CATEGORICAL_KINDS:
            arr = np.array(values, dtype=str) if n else np.array([], dtype=str)
            uniq, inverse = np.unique(arr, return_inverse=True)
            levels[spec.name] = tuple(str(u) for u in uniq)
            codes[spec.name] = inverse.astype(np.int64).reshape(n)
        elif spec.kind == "numeric":
            numeric[spec.name] = _parse_float(values, spec.name)
        elif spec.kind == "kpi":
            kpis[spec.name] = _parse_float(values, spec.name)
        else:
            eligible[spec.name] = _parse_bool(values, spec.name)
    Y = np.zeros((n, len(schema.kpis)))
    for j, name in enumerate(schema.kpis):
        Y[:, j] = kpis[name]
    return EncodedTable(schema, n, numeric, codes, levels, Y, eligible)


def _read_csv(path: str | os.PathLike, schema: Schema) -> dict[str, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(schema.columns[0].name) from None
        index = {}
        for spec in schema.columns:
            if spec.name not in header:
                raise MissingColumn(spec.name)
            index[spec.name] = header.index(spec.name)
        raw: dict[str, list[str]] = {name: [] for name in index}
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            for name, j in index.items():
                if j >= len(row):
                    raise MissingValue(lineno, name)
                raw[name].append(row[j])
    return raw


def _read_arrow(path: str | os.PathLike, schema: Schema) -> dict[str, list[str]]:
    import pyarrow.feather as feather

    tbl = feather.read_table(path)
    raw = {}
    for spec in schema.columns:
        if spec.name not in tbl.column_names:
            raise MissingColumn(spec.name)
        col = tbl.column(spec.name).to_pylist()
        raw[spec.name] = ["" if v is None else _to_text(v) for v in col]
    return raw


def _to_text(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_table(path: str | os.PathLike, schema: Schema | Iterable) -> EncodedTable:
    """Load a UTF-8, comma separated file with a header row.

    Files ending in ``.arrow``/``.feather`` are read as Arrow IPC files
    (requires ``pyarrow``).  Blank cells raise :class:`MissingValue`; there
    is no imputation.  Row numbers in errors are 1-based data rows.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_pairs(schema)
    suffix = os.fspath(path).rsplit(".", 1)[-1].lower()
    try:
        if suffix in ("arrow", "feather", "ipc"):
            raw = _read_arrow(path, schema)
        else:
            raw = _read_csv(path, schema)
    except (OSError, UnicodeDecodeError) as exc:
        raise InputUnreadable(os.fspath(path), str(exc)) from exc
    return _encode(schema, raw)


def write_table(table: EncodedTable, path: str | os.PathLike) -> None:
    """Write decoded columns as CSV that :func:`load_table` reads back exactly."""
    cols = []
    for spec in table.schema.columns:
        if spec.name in table.codes:
            cols.append(table.decode(spec.name))
        elif spec.name in table.numeric:
            cols.append([repr(float(v)) for v in table.numeric[spec.name]])
        elif spec.kind == "kpi":
            cols.append([repr(float(v)) for v in table.Y[:, table.kpi_names.index(spec.name)]])
        else:
            cols.append(["1" if v else "0" for v in table.eligible[spec.name]])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.name for c in table.schema.columns])
        w.writerows(zip(*cols))


@dataclass(frozen=True)
class SummaryReport:
    n_rows: int
    columns: dict[str, dict]
    kpi_means: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"n_rows": self.n_rows, "columns": self.columns, "kpi_means": self.kpi_means}


def summarize(table: EncodedTable) -> SummaryReport:
    columns = {}
    for spec in table.schema.columns:
        entry: dict = {"kind": spec.kind, "count": table.n_rows}
        if spec.name in table.codes:
            entry["cardinality"] = len(table.levels[spec.name])
            counts = np.bincount(table.codes[spec.name], minlength=len(table.levels[spec.name]))
            entry["level_counts"] = {
                lv: int(c) for lv, c in zip(table.levels[spec.name], counts)
            }
        elif spec.name in table.numeric:
            x = table.numeric[spec.name]
            entry["mean"] = float(x.mean()) if table.n_rows else None
        columns[spec.name] = entry
    means = {
        name: (float(table.Y[:, j].mean()) if table.n_rows else None)
        for j, name in enumerate(table.kpi_names)
    }
    return SummaryReport(table.n_rows, columns, means)
