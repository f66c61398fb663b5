"""Sparse model matrix ``[1 | A | X | AxX | AxT]`` and effect contrasts.

Treatment enters through one-hot dummies with level code 0 (control) as the
reference.  Every column of the layout is a :class:`Term`; interaction terms
record the *base* column they multiply, which is what lets an effect be read
off as ``c @ beta`` without building counterfactual matrices: forcing the
treatment of row ``j`` from control to level ``k`` changes its prediction by
``beta[A_k] + sum_b M[j, b] * beta[A_k x b]``, so a segment average of that
difference needs only the segment means of the base columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    EmptySegment,
    FewerThanTwoTreatmentLevels,
    InvalidConfig,
    ReferenceLevelRequested,
    SegmentNotInModel,
    TreatmentNotCategorical,
    UnknownColumn,
)
from .ingest import EncodedTable

INTERCEPT = "Intercept"


@dataclass(frozen=True)
class DesignSpec:
    treatment: str
    covariates: tuple[str, ...] = ()
    interact_treatment_covariates: bool = False
    interact_treatment_time: bool = False
    time: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.interact_treatment_time and self.time is None:
            raise InvalidConfig("interact_treatment_time requires a time column")
        if self.treatment in self.covariates:
            raise InvalidConfig("treatment column cannot also be a covariate")


@dataclass(frozen=True)
class Term:
    name: str
    kind: str  # intercept|treatment|numeric|categorical|period|treatment_x_covariate|treatment_x_period
    source: str | None = None
    code: int | None = None  # level code for one-hot columns
    treatment_code: int | None = None
    base: int | None = None  # column multiplied by the treatment dummy


@dataclass(frozen=True)
class ColumnLayout:
    spec: DesignSpec
    terms: tuple[Term, ...]
    levels: dict[str, tuple[str, ...]] = field(compare=True)
    blocks: dict[str, tuple[int, int]] = field(compare=True)

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    @property
    def treatment_levels(self) -> tuple[str, ...]:
        return self.levels[self.spec.treatment]

    @property
    def n_treatments(self) -> int:
        return len(self.treatment_levels)

    def treatment_code(self, level) -> int:
        level = str(level)
        try:
            return self.treatment_levels.index(level)
        except ValueError:
            raise InvalidConfig(
                f"unknown treatment level {level!r}", levels=list(self.treatment_levels)
            ) from None

    def treatment_column(self, k: int) -> int:
        return self.blocks["treatment"][0] + k - 1

    def interactions(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices of ``A_k x base`` terms and their base columns."""
        cols = [
            i for i, t in enumerate(self.terms)
            if t.treatment_code == k and t.base is not None
        ]
        return np.array(cols, dtype=np.intp), np.array(
            [self.terms[i].base for i in cols], dtype=np.intp
        )

    def treatment_owned(self) -> np.ndarray:
        return np.array([t.treatment_code is not None for t in self.terms])

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def period_columns(self) -> list[int]:
        if self.spec.time is None:
            return []
        return [
            i for i, t in enumerate(self.terms)
            if t.source == self.spec.time and t.kind in ("period", "categorical")
        ]


def _covariate_terms(name: str, levels, numeric: bool) -> list[Term]:
    if numeric:
        return [Term(name, "numeric", source=name)]
    lv = levels[name]
    return [
        Term(f"{name}[{lv[c]}]", "categorical", source=name, code=c)
        for c in range(1, len(lv))
    ]


def build_layout(spec: DesignSpec, table: EncodedTable) -> ColumnLayout:
    schema = table.schema
    if spec.treatment not in schema:
        raise UnknownColumn(spec.treatment)
    if schema[spec.treatment].kind != "treatment" or spec.treatment not in table.codes:
        raise TreatmentNotCategorical(spec.treatment)
    for c in spec.covariates + ((spec.time,) if spec.time else ()):
        if c not in schema:
            raise UnknownColumn(c)
        if schema[c].kind in ("kpi", "eligibility", "treatment"):
            raise InvalidConfig(f"column {c!r} of kind {schema[c].kind} cannot be a covariate")
    if spec.time is not None and spec.time not in table.codes:
        raise InvalidConfig(f"time column {spec.time!r} must be categorical")

    A = spec.treatment
    a_levels = table.levels[A]
    if len(a_levels) < 2:
        raise FewerThanTwoTreatmentLevels(A, len(a_levels))
    K = len(a_levels)

    terms: list[Term] = [Term(INTERCEPT, "intercept")]
    blocks: dict[str, tuple[int, int]] = {"intercept": (0, 1)}

    start = len(terms)
    terms += [
        Term(f"{A}[{a_levels[k]}]", "treatment", source=A, code=k, treatment_code=k)
        for k in range(1, K)
    ]
    blocks["treatment"] = (start, len(terms))

    start = len(terms)
    for c in spec.covariates:
        terms += _covariate_terms(c, table.levels, c in table.numeric)
    blocks["covariates"] = (start, len(terms))

    start = len(terms)
    if spec.interact_treatment_time and spec.time not in spec.covariates:
        lv = table.levels[spec.time]
        terms += [
            Term(f"{spec.time}[{lv[t]}]", "period", source=spec.time, code=t)
            for t in range(1, len(lv))
        ]
    blocks["period"] = (start, len(terms))

    start = len(terms)
    if spec.interact_treatment_covariates:
        lo, hi = blocks["covariates"]
        bases = [
            b for b in range(lo, hi)
            if not (spec.interact_treatment_time and terms[b].source == spec.time)
        ]
        for k in range(1, K):
            for b in bases:
                terms.append(Term(
                    f"{A}[{a_levels[k]}]:{terms[b].name}", "treatment_x_covariate",
                    source=terms[b].source, code=terms[b].code, treatment_code=k, base=b,
                ))
    blocks["treatment_x_covariate"] = (start, len(terms))

    start = len(terms)
    if spec.interact_treatment_time:
        bases = [
            b for b in range(len(terms))
            if terms[b].source == spec.time and terms[b].kind in ("period", "categorical")
        ]
        for k in range(1, K):
            for b in bases:
                terms.append(Term(
                    f"{A}[{a_levels[k]}]:{terms[b].name}", "treatment_x_period",
                    source=spec.time, code=terms[b].code, treatment_code=k, base=b,
                ))
    blocks["treatment_x_period"] = (start, len(terms))

    used = {A, *spec.covariates} | ({spec.time} if spec.time else set())
    levels = {c: table.levels[c] for c in sorted(used) if c in table.levels}
    return ColumnLayout(spec, tuple(terms), levels, blocks)


def _column(table: EncodedTable, term: Term, layout: ColumnLayout) -> tuple[np.ndarray, np.ndarray]:
    n = table.n_rows
    if term.kind == "intercept":
        return np.arange(n), np.ones(n)
    if term.base is not None:
        rows, vals = _column(table, layout.terms[term.base], layout)
        keep = table.codes[layout.spec.treatment][rows] == term.treatment_code
        return rows[keep], vals[keep]
    if term.kind == "numeric":
        x = table.numeric[term.source]
        rows = np.flatnonzero(x)
        return rows, x[rows]
    rows = np.flatnonzero(table.codes[term.source] == term.code)
    return rows, np.ones(len(rows))


def iter_columns(table: EncodedTable, layout: ColumnLayout) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(row_indices, values)`` for each column, rows ascending, no zeros."""
    for term in layout.terms:
        yield _column(table, term, layout)


def _check_levels(table: EncodedTable, layout: ColumnLayout) -> None:
    for col, lv in layout.levels.items():
        if table.levels.get(col) != lv:
            raise InvalidConfig(f"level dictionary of {col!r} differs from the layout's")


def build_design(table: EncodedTable, layout: ColumnLayout) -> sp.csc_matrix:
    """Model matrix in compressed sparse column form."""
    _check_levels(table, layout)
    idx_dtype = np.int32 if table.n_rows < 2**31 - 1 else np.int64
    rows_parts, val_parts = [], []
    indptr = np.zeros(layout.p + 1, dtype=np.int64)
    for j, (rows, vals) in enumerate(iter_columns(table, layout)):
        rows_parts.append(rows.astype(idx_dtype, copy=False))
        val_parts.append(vals)
        indptr[j + 1] = indptr[j] + len(rows)
    indices = np.concatenate(rows_parts) if rows_parts else np.zeros(0, idx_dtype)
    data = np.concatenate(val_parts) if val_parts else np.zeros(0)
    if indptr[-1] < 2**31 - 1:
        indptr = indptr.astype(idx_dtype)
    M = sp.csc_matrix((data, indices, indptr), shape=(table.n_rows, layout.p))
    M.has_sorted_indices = True
    return M


def build_design_rows(table: EncodedTable, layout: ColumnLayout) -> sp.csr_matrix:
    """Model matrix in compressed sparse row form, filled in place.

    Two passes over the columns (count, then fill) keep the peak footprint at
    the final matrix plus a few length-``n`` work arrays.
    """
    _check_levels(table, layout)
    n = table.n_rows
    row_nnz = np.zeros(n, dtype=np.int64)
    for rows, _ in iter_columns(table, layout):
        row_nnz[rows] += 1
    nnz = int(row_nnz.sum())
    idx_dtype = np.int32 if max(n, nnz, layout.p) < 2**31 - 1 else np.int64
    indptr = np.zeros(n + 1, dtype=idx_dtype)
    np.cumsum(row_nnz, out=indptr[1:])
    del row_nnz
    cursor = indptr[:-1].copy()
    indices = np.empty(nnz, dtype=idx_dtype)
    data = np.empty(nnz)
    for j, (rows, vals) in enumerate(iter_columns(table, layout)):
        pos = cursor[rows]
        indices[pos] = j
        data[pos] = vals
        cursor[rows] += 1
    del cursor
    M = sp.csr_matrix((data, indices, indptr), shape=(n, layout.p))
    M.has_sorted_indices = True
    return M


def sparse_nbytes(M) -> int:
    return int(M.data.nbytes + M.indices.nbytes + M.indptr.nbytes)


# --------------------------------------------------------------------------
# segments and contrasts


@dataclass(frozen=True)
class Segment:
    """Conjunction of equality predicates on categorical columns; empty = everyone."""

    predicates: tuple[tuple[str, str], ...] = ()

    @classmethod
    def of(cls, mapping: dict | None = None, **kwargs) -> "Segment":
        items = dict(mapping or {}, **kwargs)
        return cls(tuple(sorted((str(k), str(v)) for k, v in items.items())))

    @classmethod
    def parse(cls, text: str) -> "Segment":
        if text in ("", "all"):
            return cls()
        pairs = []
        for part in text.split("&"):
            k, _, v = part.partition("=")
            pairs.append((k.strip(), v.strip()))
        return cls(tuple(sorted(pairs)))

    @property
    def label(self) -> str:
        if not self.predicates:
            return "all"
        return "&".join(f"{k}={v}" for k, v in self.predicates)

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.predicates)

    def mask(self, table: EncodedTable) -> np.ndarray:
        out = np.ones(table.n_rows, dtype=bool)
        for col, level in self.predicates:
            if col not in table.codes:
                raise UnknownColumn(col)
            if str(level) not in table.levels[col]:
                return np.zeros(table.n_rows, dtype=bool)
            out &= table.codes[col] == table.level_code(col, level)
        return out

    def to_dict(self) -> dict:
        return dict(self.predicates)


def segments_by(table: EncodedTable, columns: Sequence[str]) -> list[Segment]:
    """Every level combination of ``columns`` present in the table (a partition)."""
    if not columns:
        return [Segment()]
    key = _mixed_radix(table, columns)
    present = np.unique(key)
    out = []
    for kv in present:
        preds = []
        for col in reversed(columns):
            L = len(table.levels[col])
            preds.append((col, table.levels[col][int(kv % L)]))
            kv //= L
        out.append(Segment(tuple(sorted(preds))))
    return out


def _mixed_radix(table: EncodedTable, columns: Sequence[str]) -> np.ndarray:
    key = np.zeros(table.n_rows, dtype=np.int64)
    for col in columns:
        if col not in table.codes:
            raise UnknownColumn(col)
        key = key * len(table.levels[col]) + table.codes[col]
    return key


def check_segment(layout: ColumnLayout, segment: Segment) -> None:
    allowed = set(layout.spec.covariates) | ({layout.spec.time} if layout.spec.time else set())
    for col in segment.columns:
        if col not in allowed:
            raise SegmentNotInModel(col)


@dataclass(frozen=True)
class ContrastVector:
    c: np.ndarray
    treatment: str
    segment: str
    period: str | None
    n_segment: float

    @property
    def p(self) -> int:
        return len(self.c)


def _row_selector(table, layout, segment, period) -> tuple[np.ndarray, str, str | None]:
    if segment is None:
        mask = np.ones(table.n_rows, dtype=bool)
        label = "all"
    elif isinstance(segment, Segment):
        mask = segment.mask(table)
        label = segment.label
    else:
        mask = np.asarray(segment, dtype=bool)
        label = "rows"
    if period is not None:
        time = layout.spec.time
        if time is None:
            raise InvalidConfig("period requested but the design has no time column")
        mask = mask & (table.codes[time] == table.level_code(time, period))
        period = str(period)
    return mask, label, period


def effect_contrast(
    layout: ColumnLayout,
    table: EncodedTable,
    treatment_level,
    segment=None,
    period=None,
    *,
    design=None,
    weights: np.ndarray | None = None,
) -> ContrastVector:
    """Contrast ``c`` with ``c @ beta`` = segment-average effect of level ``k`` vs control.

    ``segment`` is a :class:`Segment`, a boolean row mask, or ``None`` for the
    whole table.  Covariate means come from a 0/1 selector product with the
    design; rows are never copied.  ``weights`` are row frequencies (group
    sizes for compressed data).
    """
    k = layout.treatment_code(treatment_level)
    if k == 0:
        raise ReferenceLevelRequested(str(treatment_level))
    mask, label, period = _row_selector(table, layout, segment, period)
    sel = mask.astype(np.float64)
    if weights is not None:
        sel *= weights
    n_s = float(sel.sum())
    if n_s <= 0:
        raise EmptySegment(label if period is None else f"{label}@{period}")
    if design is None:
        design = build_design(table, layout)
    means = np.asarray(design.T @ sel).ravel() / n_s
    c = np.zeros(layout.p)
    c[layout.treatment_column(k)] = 1.0
    cols, bases = layout.interactions(k)
    c[cols] = means[bases]
    if n_s == int(n_s):
        n_s = int(n_s)
    return ContrastVector(c, layout.treatment_levels[k], label, period, n_s)


def selector_matrix(
    table: EncodedTable,
    segments: Sequence[Segment],
    periods: Sequence[str] | None = None,
    time: str | None = None,
) -> sp.csr_matrix:
    """0/1 matrix of shape ``(len(segments) * n_periods, n_rows)``.

    Cell order is segment-major, period-minor.  When every segment constrains
    the same columns the membership is computed with one vectorized key
    lookup; otherwise segment masks are evaluated one by one.
    """
    n = table.n_rows
    n_per = len(periods) if periods else 1
    if periods:
        pcodes = np.array([table.level_code(time, t) for t in periods])
        lookup = np.full(len(table.levels[time]), -1, dtype=np.int64)
        lookup[pcodes] = np.arange(len(pcodes))
        row_period = lookup[table.codes[time]]
    else:
        row_period = np.zeros(n, dtype=np.int64)

    cols = {s.columns for s in segments}
    if len(cols) == 1 and len(segments) > 1 and next(iter(cols)):
        columns = next(iter(cols))
        key = _mixed_radix(table, columns)
        seg_keys = np.array([
            _mixed_radix_single(table, columns, dict(s.predicates)) for s in segments
        ])
        order = np.argsort(seg_keys, kind="stable")
        sorted_keys = seg_keys[order]
        pos = np.searchsorted(sorted_keys, key)
        pos_c = np.minimum(pos, len(sorted_keys) - 1)
        hit = sorted_keys[pos_c] == key
        # duplicate segments are rare; fall back to the slow path for them
        if len(np.unique(seg_keys)) == len(seg_keys):
            seg_of_row = np.where(hit, order[pos_c], -1)
            keep = (seg_of_row >= 0) & (row_period >= 0)
            rows = np.flatnonzero(keep)
            cells = seg_of_row[rows] * n_per + row_period[rows]
            return sp.csr_matrix(
                (np.ones(len(rows)), (cells, rows)), shape=(len(segments) * n_per, n)
            )
    rows_all, cells_all = [], []
    for i, s in enumerate(segments):
        m = s.mask(table) & (row_period >= 0)
        rows = np.flatnonzero(m)
        rows_all.append(rows)
        cells_all.append(i * n_per + row_period[rows])
    rows = np.concatenate(rows_all) if rows_all else np.zeros(0, np.int64)
    cells = np.concatenate(cells_all) if cells_all else np.zeros(0, np.int64)
    return sp.csr_matrix(
        (np.ones(len(rows)), (cells, rows)), shape=(len(segments) * n_per, n)
    )


def _mixed_radix_single(table, columns, preds) -> int:
    key = 0
    for col in columns:
        if str(preds[col]) not in table.levels[col]:
            return -1
        key = key * len(table.levels[col]) + table.level_code(col, preds[col])
    return key
