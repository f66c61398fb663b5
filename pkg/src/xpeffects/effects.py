"""Average, conditional and time-dynamic treatment effects.

Effects are linear in the coefficients (``point = c @ beta``), so standard
errors come from the delta method, ``se = sqrt(c' cov c)``.  The naive
counterfactual-matrix computation is kept here as a slow reference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .design import (
    ColumnLayout,
    ContrastVector,
    Segment,
    build_design,
    check_segment,
    selector_matrix,
)
from .errors import (
    CovKindUnavailable,
    DegenerateSubset,
    DimensionMismatch,
    EmptySegment,
    RankDeficient,
    ReferenceLevelRequested,
    TooLargeForOracle,
)
from .ingest import EncodedTable
from .solver import CovKind
from .solver import fit as fit_gram

Z95 = float(norm.ppf(0.975))
ORACLE_MAX_ROWS = 10**6


@dataclass(frozen=True)
class EffectEstimate:
    kpi: str
    treatment: str
    segment: str
    period: str | None
    point: float
    se: float
    n_segment: float
    cov_kind: str

    @property
    def z(self) -> float:
        return self.point / self.se if self.se > 0 else math.nan

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.point - Z95 * self.se, self.point + Z95 * self.se)

    def to_dict(self) -> dict:
        lo, hi = self.ci95
        return {
            "kpi": self.kpi,
            "treatment": self.treatment,
            "segment": self.segment,
            "period": self.period,
            "point": self.point,
            "se": self.se,
            "z": self.z,
            "ci_lo": lo,
            "ci_hi": hi,
            "n": self.n_segment,
            "cov_kind": self.cov_kind,
        }


def fitted_covariance(fit, kind) -> np.ndarray:
    kind = CovKind(kind)
    if kind not in fit.cov:
        raise CovKindUnavailable(kind.value)
    return fit.cov[kind]


def estimate_effect(fit, contrast: ContrastVector, cov_kind=CovKind.HOMOSKEDASTIC,
                    kpi: int = 0) -> EffectEstimate:
    if contrast.p != fit.beta.shape[0]:
        raise DimensionMismatch(f"contrast has {contrast.p} entries, fit has {fit.beta.shape[0]}")
    cov = fitted_covariance(fit, cov_kind)[kpi]
    c = contrast.c
    var = float(c @ cov @ c)
    return EffectEstimate(
        kpi=fit.kpi_names[kpi],
        treatment=contrast.treatment,
        segment=contrast.segment,
        period=contrast.period,
        point=float(c @ fit.beta[:, kpi]),
        se=math.sqrt(max(var, 0.0)),
        n_segment=contrast.n_segment,
        cov_kind=CovKind(cov_kind).value,
    )


def effect_sweep(
    fit,
    layout: ColumnLayout,
    table: EncodedTable,
    *,
    treatments: Sequence[str] | None = None,
    segments: Sequence[Segment] | None = None,
    periods: Sequence[str] | None = None,
    kpis: Sequence[int] | None = None,
    cov_kind=CovKind.HOMOSKEDASTIC,
    design=None,
    weights: np.ndarray | None = None,
) -> list[EffectEstimate]:
    """Every (treatment, segment, period, KPI) effect from one fitted model.

    Segment/period covariate means are computed once for all cells with a
    single sparse selector product and shared across treatments and KPIs.
    Output order is treatment, segment, period, KPI (outermost first).
    Empty cells raise :class:`EmptySegment`.
    """
    cov = fitted_covariance(fit, cov_kind)
    if treatments is None:
        treatments = layout.treatment_levels[1:]
    codes = [layout.treatment_code(t) for t in treatments]
    for t, k in zip(treatments, codes):
        if k == 0:
            raise ReferenceLevelRequested(str(t))
    segments = list(segments) if segments else [Segment()]
    for s in segments:
        check_segment(layout, s)
    kpis = list(range(fit.beta.shape[1])) if kpis is None else list(kpis)
    if design is None:
        design = build_design(table, layout)

    S = selector_matrix(table, segments, periods, layout.spec.time)
    if weights is not None:
        S = S.multiply(np.asarray(weights, dtype=np.float64)[None, :]).tocsr()
    counts = np.asarray(S.sum(axis=1)).ravel()
    n_per = len(periods) if periods else 1
    empty = np.flatnonzero(counts <= 0)
    if len(empty):
        i = int(empty[0])
        label = segments[i // n_per].label
        raise EmptySegment(label if not periods else f"{label}@{periods[i % n_per]}")
    means = np.asarray((S @ design).todense()) / counts[:, None]

    n_cells = len(counts)
    C = np.zeros((len(codes) * n_cells, layout.p))
    for t_idx, k in enumerate(codes):
        block = slice(t_idx * n_cells, (t_idx + 1) * n_cells)
        C[block, layout.treatment_column(k)] = 1.0
        cols, bases = layout.interactions(k)
        C[block, cols] = means[:, bases]

    points = C @ fit.beta[:, kpis]
    ses = np.empty_like(points)
    for j_idx, j in enumerate(kpis):
        var = ((C @ cov[j]) * C).sum(axis=1)
        ses[:, j_idx] = np.sqrt(np.maximum(var, 0.0))

    kind = CovKind(cov_kind).value
    out = []
    for t_idx, k in enumerate(codes):
        for cell in range(n_cells):
            row = t_idx * n_cells + cell
            seg = segments[cell // n_per]
            period = str(periods[cell % n_per]) if periods else None
            n_s = float(counts[cell])
            n_s = int(n_s) if n_s == int(n_s) else n_s
            for j_idx, j in enumerate(kpis):
                out.append(EffectEstimate(
                    kpi=fit.kpi_names[j], treatment=layout.treatment_levels[k],
                    segment=seg.label, period=period, point=float(points[row, j_idx]),
                    se=float(ses[row, j_idx]), n_segment=n_s, cov_kind=kind,
                ))
    return out


def naive_counterfactual_oracle(fit, layout: ColumnLayout, table: EncodedTable, treatment_level,
                                segment=None, period=None, *, kpi: int = 0,
                                weights: np.ndarray | None = None,
                                max_rows: int = ORACLE_MAX_ROWS) -> float:
    """Segment-average effect from two dense counterfactual design matrices.

    Builds ``M(A = A_k)`` and ``M(A = A_1)`` in full, predicts both and
    averages the difference over the segment.  Deliberately slow.
    """
    if table.n_rows > max_rows:
        raise TooLargeForOracle(table.n_rows, max_rows)
    k = layout.treatment_code(treatment_level)
    if k == 0:
        raise ReferenceLevelRequested(str(treatment_level))
    A = layout.spec.treatment
    treated = build_design(table.with_codes(A, np.full(table.n_rows, k)), layout).toarray()
    control = build_design(table.with_codes(A, np.zeros(table.n_rows, dtype=np.int64)), layout).toarray()
    diff = treated @ fit.beta[:, kpi] - control @ fit.beta[:, kpi]

    if segment is None:
        mask = np.ones(table.n_rows, dtype=bool)
    elif isinstance(segment, Segment):
        mask = segment.mask(table)
    else:
        mask = np.asarray(segment, dtype=bool)
    if period is not None:
        time = layout.spec.time
        mask = mask & (table.codes[time] == table.level_code(time, period))
    w = mask.astype(np.float64) if weights is None else mask * np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise EmptySegment("oracle segment")
    return float((w * diff).sum() / w.sum())


def ols_effect_statistic(layout: ColumnLayout, treatment_level, *, kpi: int = 0,
                         mask_key: str | None = None):
    """Weighted-refit effect statistic for :func:`xpeffects.blb.blb_estimate`.

    The returned callable takes a :class:`~xpeffects.solver.RawData` and
    frequency weights, refits OLS on the weighted rows and returns the
    (segment) average effect of ``treatment_level``.  ``mask_key`` names a
    boolean ``aux`` array of the data that selects the segment.
    """
    k = layout.treatment_code(treatment_level)
    if k == 0:
        raise ReferenceLevelRequested(str(treatment_level))
    col = layout.treatment_column(k)
    cols, bases = layout.interactions(k)

    def statistic(data, weights) -> float:
        d = data.reweighted(weights)
        try:
            f = fit_gram(d.gram(threads=1), layout)
        except RankDeficient as exc:
            raise DegenerateSubset(str(exc)) from exc
        sel = d.weights if mask_key is None else d.weights * data.aux[mask_key]
        n_s = sel.sum()
        if n_s <= 0:
            raise DegenerateSubset("segment has no weight in this resample")
        means = np.asarray(d.M.T @ sel).ravel() / n_s
        b = f.beta[:, kpi]
        return float(b[col] + means[bases] @ b[cols])

    return statistic
