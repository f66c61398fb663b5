"""Two-stage least squares without materializing fitted treatments.

Model::

    y = b0 + A b1 + X b2 + e        (structural)
    A = g0 + Z g1 + X g2 + v        (first stage)

With ``W = [1 Z X]`` the fitted treatments are ``A_hat = W G`` and the
second-stage design is ``M_hat = W P`` for a small ``q x p`` matrix ``P``
(``G`` in the treatment columns, unit vectors for the intercept and ``X``).
Hence ``M_hat'M_hat = P'(W'W)P`` and ``M_hat'y = P'W'y``: every quantity is
a block of the single sparse Gram matrix of ``[1 A X Z]``, which is
accumulated over row chunks without ever holding the full matrix.
Residuals use the observed ``A``, never ``A_hat``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .design import DesignSpec, build_design_rows, build_layout
from .errors import InvalidConfig, TooLargeForOracle, WeakInstrumentWarning
from .ingest import EncodedTable
from .solver import CovKind, accumulate_gram_streamed, factor

WEAK_F = 10.0
ORACLE_MAX_ROWS = 10**5


@dataclass
class TslsFit:
    gamma: np.ndarray  # q x (K-1), rows follow instrument_names
    beta: np.ndarray  # p x m
    rss: np.ndarray
    df_resid: float
    first_stage_F: np.ndarray
    names: list[str]
    instrument_names: list[str]
    kpi_names: list[str]
    layout: object = None
    cov: dict = field(default_factory=dict)

    @property
    def sigma2(self) -> np.ndarray:
        return self.rss / self.df_resid

    def coef(self, kpi: int = 0) -> dict[str, float]:
        return {n: float(b) for n, b in zip(self.names, self.beta[:, kpi])}


def _validate(table: EncodedTable, treatment, instruments, covariates):
    if not instruments:
        raise InvalidConfig("2SLS needs at least one instrument")
    for z in instruments:
        if z in covariates or z == treatment:
            raise InvalidConfig(f"instrument {z!r} may not be a covariate or the treatment")
        if z not in table.codes:
            raise InvalidConfig(f"instrument {z!r} must be a categorical column")


def _first_stage_F(CtC, W, R, A_idx, n, q_z) -> np.ndarray:
    out = []
    WtW = CtC[np.ix_(W, W)]
    RtR = CtC[np.ix_(R, R)]
    for a in A_idx:
        ata = CtC[a, a]
        g_u = sla.solve(WtW, CtC[W, a], assume_a="pos")
        g_r = sla.solve(RtR, CtC[R, a], assume_a="pos")
        rss_u = ata - CtC[W, a] @ g_u
        rss_r = ata - CtC[R, a] @ g_r
        rss_u = max(rss_u, np.finfo(float).eps * ata)
        df = n - len(W)
        out.append(max(rss_r - rss_u, 0.0) / q_z / (rss_u / df) if df > 0 else np.nan)
    return np.array(out)


def fit_2sls(table: EncodedTable, treatment: str, instruments: Sequence[str],
             covariates: Sequence[str] = (), kpis: Sequence[str] | None = None,
             *, threads: int | None = None) -> TslsFit:
    """Gram-composed two-stage least squares for one-hot (endogenous) treatments.

    Raises :class:`~xpeffects.errors.RankDeficient` when ``W`` or the
    composed second stage is singular (e.g. instruments unrelated to the
    treatment); warns with :class:`WeakInstrumentWarning` when a first-stage
    F statistic is below 10.
    """
    instruments = list(instruments)
    covariates = list(covariates)
    _validate(table, treatment, instruments, covariates)
    layout_m = build_layout(DesignSpec(treatment, tuple(covariates)), table)
    layout_c = build_layout(DesignSpec(treatment, tuple(covariates + instruments)), table)
    p = layout_m.p
    names_c = layout_c.names

    kpi_names = list(kpis) if kpis is not None else list(table.kpi_names)
    cols = [table.kpi_names.index(k) for k in kpi_names]
    Y = table.Y[:, cols]

    def design_block(lo, hi):
        return build_design_rows(table.take(np.arange(lo, hi)), layout_c)

    g = accumulate_gram_streamed(design_block, Y, threads=threads)
    CtC, CtY = g.XtWX, g.XtWY
    n = g.sum_weights

    a_lo, a_hi = layout_m.blocks["treatment"]
    A_idx = list(range(a_lo, a_hi))
    X_idx = [0] + [i for i in range(p) if i not in A_idx and i != 0]
    Z_idx = list(range(p, layout_c.p))
    W = [0] + Z_idx + X_idx[1:]

    WtW = CtC[np.ix_(W, W)]
    Lw = factor(WtW, [names_c[i] for i in W])
    gamma = sla.cho_solve((Lw, True), CtC[np.ix_(W, A_idx)])

    P = np.zeros((len(W), p))
    pos_w = {c: i for i, c in enumerate(W)}
    for j in range(p):
        if j in A_idx:
            P[:, j] = gamma[:, A_idx.index(j)]
        else:
            P[pos_w[j], j] = 1.0
    H = P.T @ WtW @ P
    H = (H + H.T) / 2
    hy = P.T @ CtY[W]
    Lh = factor(H, layout_m.names)
    beta = sla.cho_solve((Lh, True), hy)

    MtM = CtC[:p, :p]
    MtY = CtY[:p]
    rss = (g.YtWY - 2 * np.einsum("pm,pm->m", beta, MtY)
           + np.einsum("pm,pm->m", beta, MtM @ beta))
    df = n - p
    H_inv = sla.cho_solve((Lh, True), np.eye(p))
    H_inv = (H_inv + H_inv.T) / 2
    cov = (rss / df)[:, None, None] * H_inv[None]

    F = _first_stage_F(CtC, W, X_idx, A_idx, n, len(Z_idx))
    weak = [names_c[a] for a, f in zip(A_idx, F) if f < WEAK_F]
    if weak:
        warnings.warn(f"weak instruments for {weak}: first-stage F below {WEAK_F}",
                      WeakInstrumentWarning, stacklevel=2)
    return TslsFit(
        gamma=gamma, beta=beta, rss=rss, df_resid=df, first_stage_F=F,
        names=layout_m.names, instrument_names=[names_c[i] for i in W],
        kpi_names=kpi_names, layout=layout_m, cov={CovKind.HOMOSKEDASTIC: cov},
    )


def _dense_block(table: EncodedTable, column: str) -> np.ndarray:
    if column in table.numeric:
        return table.numeric[column][:, None]
    codes = table.codes[column]
    return (codes[:, None] == np.arange(1, len(table.levels[column]))[None, :]).astype(float)


def dense_2sls_oracle(table: EncodedTable, treatment: str, instruments: Sequence[str],
                      covariates: Sequence[str] = (), kpis: Sequence[str] | None = None,
                      *, max_rows: int = ORACLE_MAX_ROWS) -> TslsFit:
    """Textbook two-pass 2SLS on dense arrays, for cross-checking."""
    if table.n_rows > max_rows:
        raise TooLargeForOracle(table.n_rows, max_rows)
    n = table.n_rows
    one = np.ones((n, 1))
    A = _dense_block(table, treatment)
    X = np.hstack([one] + [_dense_block(table, c) for c in covariates])
    Z = np.hstack([_dense_block(table, z) for z in instruments])
    W = np.hstack([one, Z, X[:, 1:]])
    kpi_names = list(kpis) if kpis is not None else list(table.kpi_names)
    Y = table.Y[:, [table.kpi_names.index(k) for k in kpi_names]]

    gamma = np.linalg.lstsq(W, A, rcond=None)[0]
    A_hat = W @ gamma
    M_hat = np.hstack([one, A_hat, X[:, 1:]])
    M = np.hstack([one, A, X[:, 1:]])
    beta = np.linalg.lstsq(M_hat, Y, rcond=None)[0]
    resid = Y - M @ beta
    rss = (resid ** 2).sum(axis=0)
    p = M.shape[1]
    inv = np.linalg.inv(M_hat.T @ M_hat)
    cov = (rss / (n - p))[:, None, None] * inv[None]

    F = []
    for k in range(A.shape[1]):
        ru = A[:, k] - W @ np.linalg.lstsq(W, A[:, k], rcond=None)[0]
        rr = A[:, k] - X @ np.linalg.lstsq(X, A[:, k], rcond=None)[0]
        rss_u, rss_r = ru @ ru, rr @ rr
        F.append(((rss_r - rss_u) / Z.shape[1]) / (rss_u / (n - W.shape[1])))
    layout = build_layout(DesignSpec(treatment, tuple(covariates)), table)
    return TslsFit(
        gamma=gamma, beta=beta, rss=rss, df_resid=n - p, first_stage_F=np.array(F),
        names=layout.names, instrument_names=[], kpi_names=kpi_names, layout=layout,
        cov={CovKind.HOMOSKEDASTIC: cov},
    )
