"""Weighted least squares through the normal equations.

One Cholesky factor of ``M'WM`` is shared by every KPI column of ``Y``.
Covariances follow the sandwich form ``B meat B`` with ``B = (M'WM)^-1``:

* homoskedastic: ``sigma2 * B``
* HC0: meat ``sum_i w_i x_i x_i' e_i^2``; HC1 scales HC0 by ``n / (n - p)``
* clustered: meat ``sum_c s_c s_c'`` with cluster scores ``s_c = sum_{i in c} w_i x_i e_i``
  and factor ``G / (G - 1) * (n - 1) / (n - p)``

Weights are frequency weights throughout, so raw rows (weight 1), compressed
groups (weight = group size) and bootstrap resamples (multinomial counts)
all run through the same code.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ._parallel import ordered_map, tree_sum
from .errors import DataError, DimensionMismatch, MissingClusterIds, RankDeficient

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-12
# sums inside a chunk are sequential, across chunks pairwise; short chunks
# keep rounding error near pairwise-summation level at no speed cost
CHUNK_ROWS = 1 << 12


class CovKind(str, Enum):
    HOMOSKEDASTIC = "homoskedastic"
    HC0 = "HC0"
    HC1 = "HC1"
    CLUSTERED = "clustered"


@dataclass(frozen=True)
class GramSystem:
    XtWX: np.ndarray
    XtWY: np.ndarray
    YtWY: np.ndarray
    sum_weights: float
    n_effective: int

    @property
    def p(self) -> int:
        return self.XtWX.shape[0]

    @property
    def m(self) -> int:
        return self.XtWY.shape[1]

    def __add__(self, other: "GramSystem") -> "GramSystem":
        return GramSystem(
            self.XtWX + other.XtWX,
            self.XtWY + other.XtWY,
            self.YtWY + other.YtWY,
            self.sum_weights + other.sum_weights,
            self.n_effective + other.n_effective,
        )


def _as_2d(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    return Y.reshape(-1, 1) if Y.ndim == 1 else Y


def _chunk_gram(Mc, Yc, wc) -> GramSystem:
    Mw = sp.diags(wc) @ Mc
    WY = wc[:, None] * Yc
    return GramSystem(
        np.asarray((Mc.T @ Mw).todense()),
        np.asarray(Mc.T @ WY),
        np.einsum("ij,ij->j", WY, Yc),
        float(wc.sum()),
        int(np.count_nonzero(wc)),
    )


def _chunks(n: int, chunk_rows: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk_rows, n)) for lo in range(0, n, chunk_rows)]


def accumulate_gram(M, Y, weights=None, *, threads: int | None = None,
                    chunk_rows: int = CHUNK_ROWS) -> GramSystem:
    """Weighted cross products ``M'WM``, ``M'WY`` and per-KPI ``Y'WY``.

    Rows are split into fixed-size chunks whose partial products are merged
    by a pairwise tree, so results do not depend on ``threads``.
    """
    M = sp.csr_matrix(M)
    Y = _as_2d(Y)
    n, p = M.shape
    if Y.shape[0] != n:
        raise DimensionMismatch(f"design has {n} rows but Y has {Y.shape[0]}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionMismatch(f"expected {n} weights, got {w.shape}")
        if (w < 0).any():
            raise DataError("weights must be nonnegative")
    if n == 0:
        return GramSystem(np.zeros((p, p)), np.zeros((p, Y.shape[1])),
                          np.zeros(Y.shape[1]), 0.0, 0)

    def partial(bounds):
        lo, hi = bounds
        return _chunk_gram(M[lo:hi], Y[lo:hi], w[lo:hi])

    return tree_sum(ordered_map(partial, _chunks(n, chunk_rows), threads))


def accumulate_gram_streamed(design_block: Callable[[int, int], sp.spmatrix], Y, *,
                             threads: int | None = None, chunk_rows: int = CHUNK_ROWS) -> GramSystem:
    """Same sums as :func:`accumulate_gram` with unit weights, but the design
    rows of each chunk come from ``design_block(lo, hi)``, so the full matrix
    never exists at once.  Chunking and reduction order are identical."""
    Y = _as_2d(Y)
    n = Y.shape[0]
    if n == 0:
        p = design_block(0, 0).shape[1]
        return GramSystem(np.zeros((p, p)), np.zeros((p, Y.shape[1])),
                          np.zeros(Y.shape[1]), 0.0, 0)

    def partial(bounds):
        lo, hi = bounds
        Mc = sp.csr_matrix(design_block(lo, hi))
        if Mc.shape[0] != hi - lo:
            raise DimensionMismatch(f"design block has {Mc.shape[0]} rows, expected {hi - lo}")
        return _chunk_gram(Mc, Y[lo:hi], np.ones(hi - lo))

    return tree_sum(ordered_map(partial, _chunks(n, chunk_rows), threads))


def _diagnose(A: np.ndarray, tol: float) -> list[int]:
    """Columns taking part in a linear dependency, found by a column-by-column
    Cholesky that skips columns with a vanishing pivot."""
    p = A.shape[0]
    kept: list[int] = []
    involved: set[int] = set()
    for j in range(p):
        ajj = A[j, j]
        if ajj <= 0:
            involved.add(j)
            continue
        if kept:
            sub = A[np.ix_(kept, kept)]
            coef = sla.solve(sub, A[kept, j], assume_a="pos")
            pivot = ajj - A[kept, j] @ coef
        else:
            coef = np.zeros(0)
            pivot = ajj
        if pivot <= tol * ajj:
            scale = np.sqrt(np.diag(A)[kept] / ajj)
            involved.add(j)
            involved.update(k for k, a in zip(kept, coef) if abs(a) * scale[kept.index(k)] > 1e-6)
        else:
            kept.append(j)
    return sorted(involved)


def factor(A: np.ndarray, names: Sequence[str] | None = None, *, tol: float = PIVOT_TOL) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`RankDeficient` naming the culprit columns.

    A pivot counts as vanishing when it falls below ``tol`` times the column's
    own diagonal entry, which keeps the test invariant to column scaling.
    """
    p = A.shape[0]
    diag = np.diag(A).copy()
    L = None
    if p and (diag > 0).all():
        try:
            L = sla.cholesky(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            L = None
        if L is not None and not (np.diag(L) ** 2 > tol * diag).all():
            L = None
    if L is None:
        cols = _diagnose(A, tol) if p else []
        if not cols:
            cols = list(range(p))
        raise RankDeficient(cols, [names[c] for c in cols] if names else None)
    return L


@dataclass
class FitResult:
    beta: np.ndarray  # p x m
    chol: np.ndarray
    gram: GramSystem
    rss: np.ndarray
    df_resid: float
    names: list[str]
    kpi_names: list[str]
    layout: object = None
    ridge: float = 0.0
    cov: dict = field(default_factory=dict)  # CovKind -> (m, p, p)

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def m(self) -> int:
        return self.beta.shape[1]

    @property
    def sigma2(self) -> np.ndarray:
        if self.df_resid <= 0:
            return np.full(self.m, np.nan)
        return self.rss / self.df_resid

    @cached_property
    def bread(self) -> np.ndarray:
        B = sla.cho_solve((self.chol, True), np.eye(self.p), check_finite=False)
        return (B + B.T) / 2

    def coef(self, kpi: int = 0) -> dict[str, float]:
        return {name: float(b) for name, b in zip(self.names, self.beta[:, kpi])}


def fit(gram: GramSystem, layout=None, *, ridge: float = 0.0,
        names: Sequence[str] | None = None, kpi_names: Sequence[str] | None = None) -> FitResult:
    """Solve the normal equations for every KPI with a single factorization."""
    if names is None:
        names = layout.names if layout is not None else [f"x{i}" for i in range(gram.p)]
    if kpi_names is None:
        kpi_names = [f"y{j}" for j in range(gram.m)]
    A = gram.XtWX
    if ridge:
        logger.warning("adding ridge %g * I to the Gram matrix", ridge)
        A = A + ridge * np.eye(gram.p)
    L = factor(A, list(names))
    beta = sla.cho_solve((L, True), gram.XtWY, check_finite=False)
    rss = (gram.YtWY - 2 * np.einsum("pm,pm->m", beta, gram.XtWY)
           + np.einsum("pm,pm->m", beta, gram.XtWX @ beta))
    return FitResult(
        beta=beta, chol=L, gram=gram, rss=rss,
        df_resid=gram.sum_weights - gram.p, names=list(names),
        kpi_names=list(kpi_names), layout=layout, ridge=ridge,
    )


class WeightedData(Protocol):
    """What :func:`covariance` needs from a dataset."""

    n_obs: float
    clusters: np.ndarray | None

    def gram(self, threads: int | None = None) -> GramSystem: ...
    def residual_ss(self, beta: np.ndarray) -> np.ndarray: ...
    def hc_meat(self, beta: np.ndarray) -> np.ndarray: ...
    def cluster_meat(self, beta: np.ndarray) -> np.ndarray: ...
    def n_clusters(self) -> int: ...


def _cluster_indicator(clusters: np.ndarray, w: np.ndarray) -> tuple[sp.csr_matrix, int]:
    uniq, inv = np.unique(clusters, return_inverse=True)
    G = len(uniq)
    C = sp.csr_matrix((np.ones(len(inv)), (inv, np.arange(len(inv)))), shape=(G, len(inv)))
    present = len(np.unique(inv[w > 0]))
    return C, present


class RawData:
    """Row-level data: design ``M``, KPIs ``Y``, frequency weights and optional clusters.

    ``aux`` carries extra per-row arrays (segment masks, policy actions) that
    must follow the rows through :meth:`subset`.
    """

    def __init__(self, M, Y, weights=None, clusters=None, aux: dict | None = None,
                 kpi_names: Sequence[str] | None = None):
        self.M = sp.csr_matrix(M)
        self.Y = _as_2d(Y)
        n = self.M.shape[0]
        if self.Y.shape[0] != n:
            raise DimensionMismatch(f"design has {n} rows but Y has {self.Y.shape[0]}")
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        self.clusters = None if clusters is None else np.asarray(clusters)
        self.aux = dict(aux or {})
        self.kpi_names = list(kpi_names) if kpi_names is not None else None

    @classmethod
    def from_table(cls, table, layout, *, cluster: str | None = None, design=None) -> "RawData":
        """Rows of an encoded table under ``layout``; ``cluster`` names a cluster_id column."""
        from .design import build_design

        if design is None:
            design = build_design(table, layout)
        clusters = table.codes[cluster] if cluster is not None else None
        return cls(design, table.Y, clusters=clusters, kpi_names=table.kpi_names)

    def __len__(self) -> int:
        return self.M.shape[0]

    @property
    def n_obs(self) -> float:
        return float(self.weights.sum())

    def subset(self, rows) -> "RawData":
        return RawData(
            self.M[rows], self.Y[rows], self.weights[rows],
            None if self.clusters is None else self.clusters[rows],
            {k: v[rows] for k, v in self.aux.items()}, self.kpi_names,
        )

    def reweighted(self, weights) -> "RawData":
        out = RawData.__new__(RawData)
        out.M, out.Y, out.clusters, out.aux = self.M, self.Y, self.clusters, self.aux
        out.kpi_names = self.kpi_names
        out.weights = np.asarray(weights, dtype=np.float64) * self.weights
        return out

    def gram(self, threads: int | None = None) -> GramSystem:
        return accumulate_gram(self.M, self.Y, self.weights, threads=threads)

    def residuals(self, beta) -> np.ndarray:
        return self.Y - self.M @ beta

    def residual_ss(self, beta) -> np.ndarray:
        e = self.residuals(beta)
        return np.einsum("i,ij->j", self.weights, e * e)

    def hc_meat(self, beta) -> np.ndarray:
        e = self.residuals(beta)
        zero = np.zeros((len(e), 1))
        return np.array([
            accumulate_gram(self.M, zero, self.weights * e[:, j] ** 2).XtWX
            for j in range(e.shape[1])
        ])

    def n_clusters(self) -> int:
        if self.clusters is None:
            raise MissingClusterIds()
        return _cluster_indicator(self.clusters, self.weights)[1]

    def cluster_meat(self, beta) -> np.ndarray:
        if self.clusters is None:
            raise MissingClusterIds()
        C, _ = _cluster_indicator(self.clusters, self.weights)
        e = self.residuals(beta)
        out = []
        for j in range(e.shape[1]):
            S = C @ (sp.diags(self.weights * e[:, j]) @ self.M)
            out.append(np.asarray((S.T @ S).todense()))
        return np.array(out)


def covariance(fit_result: FitResult, kind, data: WeightedData | None = None) -> np.ndarray:
    """Covariance of the coefficients for every KPI, shape ``(m, p, p)``.

    Homoskedastic covariance uses the residual sum of squares from ``data``
    when given, otherwise the Gram-level value stored on the fit.
    """
    kind = CovKind(kind)
    B = fit_result.bread
    beta = fit_result.beta
    p = fit_result.p
    if kind is CovKind.HOMOSKEDASTIC:
        rss = data.residual_ss(beta) if data is not None else fit_result.rss
        df = fit_result.df_resid
        sigma2 = rss / df if df > 0 else np.full(len(rss), np.nan)
        return sigma2[:, None, None] * B[None, :, :]
    if data is None:
        raise DataError(f"{kind.value} covariance needs the data it was fit on")
    n = data.n_obs
    if kind is CovKind.CLUSTERED:
        if data.clusters is None:
            raise MissingClusterIds()
        meat = data.cluster_meat(beta)
        G = data.n_clusters()
        scale = (G / (G - 1)) * ((n - 1) / (n - p)) if G > 1 and n > p else np.nan
    else:
        meat = data.hc_meat(beta)
        scale = 1.0 if kind is CovKind.HC0 else (n / (n - p) if n > p else np.nan)
    cov = scale * (B @ meat @ B)
    return (cov + cov.transpose(0, 2, 1)) / 2


def ols(data: WeightedData, layout=None, cov_kinds: Sequence = (CovKind.HOMOSKEDASTIC,),
        *, ridge: float = 0.0, threads: int | None = None,
        kpi_names: Sequence[str] | None = None) -> FitResult:
    """Fit every KPI of ``data`` and attach the requested covariances.

    The stored residual sum of squares is recomputed from the data (raw
    residuals or per-group sufficient statistics) rather than taken from the
    Gram identity, which loses digits to cancellation.
    """
    if kpi_names is None:
        kpi_names = getattr(data, "kpi_names", None)
    result = fit(data.gram(threads), layout, ridge=ridge, kpi_names=kpi_names)
    result.rss = data.residual_ss(result.beta)
    for kind in cov_kinds:
        kind = CovKind(kind)
        result.cov[kind] = covariance(result, kind, data)
    return result
