"""Greedy personalized policies and their evaluation against a baseline.

Rewards are model predictions.  The individual effect of action ``k`` for
user ``j`` is ``delta_j(k) = beta[A_k] + x_j' beta[A_k x X]`` (zero for
control), read directly off the fitted coefficients.  The policy statistic

    T = sum_j delta_j(pi(x_j)) - delta_j(pi0(x_j))

is linear in the coefficients, so ``T = c' beta`` for a single aggregated
contrast ``c`` and the one-sided test of ``T > 0`` uses ``se = sqrt(c' cov c)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm

from .blb import BlbConfig, blb_estimate
from .design import ColumnLayout, build_design
from .effects import fitted_covariance
from .errors import DegenerateSubset, InvalidConfig, RankDeficient
from .ingest import EncodedTable
from .solver import CovKind, RawData
from .solver import fit as fit_gram


@dataclass(frozen=True)
class IndividualEffects:
    values: np.ndarray  # n x K, column 0 is control (always 0)
    eligible: np.ndarray  # n x K bool
    levels: tuple[str, ...]


@dataclass(frozen=True)
class PolicyAssignment:
    actions: np.ndarray  # action code per user
    levels: tuple[str, ...]
    source: str = "greedy"

    def labels(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=object)[self.actions]


@dataclass(frozen=True)
class PolicyEvalResult:
    statistic: float
    se: float
    z: float
    p_value: float
    n_users: int
    method: str
    ci: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        out = {
            "statistic": self.statistic,
            "se": self.se,
            "z": self.z,
            "p_value": self.p_value,
            "n_users": self.n_users,
            "method": self.method,
        }
        if self.ci is not None:
            out["ci_lo"], out["ci_hi"] = self.ci
        return out


def _delta_matrix(beta: np.ndarray, layout: ColumnLayout, M) -> np.ndarray:
    n = M.shape[0]
    K = layout.n_treatments
    out = np.zeros((n, K))
    M = sp.csc_matrix(M)
    for k in range(1, K):
        cols, bases = layout.interactions(k)
        out[:, k] = beta[layout.treatment_column(k)]
        if len(cols):
            out[:, k] += M[:, bases] @ beta[cols]
    return out


def individual_effects(fit, layout: ColumnLayout, table: EncodedTable, *, kpi: int = 0,
                       design=None, eligible: np.ndarray | None = None) -> IndividualEffects:
    """Predicted effect of every action versus control for every user."""
    if design is None:
        design = build_design(table, layout)
    values = _delta_matrix(fit.beta[:, kpi], layout, design)
    if eligible is None:
        eligible = table.eligibility_mask()
    eligible = np.asarray(eligible, dtype=bool).copy()
    eligible[:, 0] = True
    return IndividualEffects(values, eligible, layout.treatment_levels)


def greedy_policy(effects: IndividualEffects, baseline=None) -> PolicyAssignment:
    """Per-user argmax over eligible actions; ties go to the lowest action index.

    The baseline does not change the argmax (it shifts each user's row by a
    constant) and is accepted only for symmetry with :func:`evaluate_policy`.
    """
    masked = np.where(effects.eligible, effects.values, -np.inf)
    if not np.isfinite(masked).any(axis=1).all():
        raise InvalidConfig("a user has no eligible action")
    return PolicyAssignment(np.argmax(masked, axis=1).astype(np.int64), effects.levels)


def constant_policy(level: str, layout: ColumnLayout, n: int) -> PolicyAssignment:
    k = layout.treatment_code(level)
    return PolicyAssignment(np.full(n, k, dtype=np.int64), layout.treatment_levels, f"constant:{level}")


def _actions(policy, n: int) -> np.ndarray:
    a = policy.actions if isinstance(policy, PolicyAssignment) else np.asarray(policy)
    a = np.asarray(a, dtype=np.int64)
    if a.shape != (n,):
        raise InvalidConfig(f"policy must assign an action to each of {n} users")
    return a


def policy_contrast(layout: ColumnLayout, design, policy, baseline) -> np.ndarray:
    """Aggregated contrast ``c`` with ``c @ beta = T``.

    ``D = onehot(pi) - onehot(pi0)`` and ``D' M`` supplies every interaction
    entry in one sparse product.
    """
    n = design.shape[0]
    K = layout.n_treatments
    pi = _actions(policy, n)
    pi0 = _actions(baseline, n)
    rows = np.arange(n)
    D = (sp.csr_matrix((np.ones(n), (rows, pi)), shape=(n, K))
         - sp.csr_matrix((np.ones(n), (rows, pi0)), shape=(n, K)))
    G = np.asarray((D.T @ design).todense())
    counts = np.asarray(D.sum(axis=0)).ravel()
    c = np.zeros(layout.p)
    for k in range(1, K):
        c[layout.treatment_column(k)] = counts[k]
        cols, bases = layout.interactions(k)
        c[cols] = G[k, bases]
    return c


def _one_sided(T: float, se: float) -> tuple[float, float]:
    if se > 0:
        z = T / se
        return z, float(norm.sf(z))
    if T == 0:
        return math.nan, 0.5
    return (math.inf, 0.0) if T > 0 else (-math.inf, 1.0)


def policy_statistic(layout: ColumnLayout, *, kpi: int = 0):
    """Weighted-refit ``T`` for the bootstrap; data ``aux`` must carry ``pi`` and ``pi0``."""

    def statistic(data: RawData, weights) -> float:
        d = data.reweighted(weights)
        try:
            f = fit_gram(d.gram(threads=1), layout)
        except RankDeficient as exc:
            raise DegenerateSubset(str(exc)) from exc
        delta = _delta_matrix(f.beta[:, kpi], layout, d.M)
        idx = np.arange(len(d.weights))
        diff = delta[idx, data.aux["pi"]] - delta[idx, data.aux["pi0"]]
        return float(d.weights @ diff)

    return statistic


def evaluate_policy(fit, layout: ColumnLayout, table: EncodedTable, policy, baseline,
                    cov_kind=CovKind.HOMOSKEDASTIC, *, kpi: int = 0, design=None,
                    method: str = "delta", blb_config: BlbConfig | None = None,
                    threads: int | None = None) -> PolicyEvalResult:
    """One-sided test of ``H0: T = 0`` against ``T > 0``.

    ``method="delta"`` uses the fitted covariance; ``method="blb"`` refits on
    bag-of-little-bootstraps weight vectors with both policies held fixed.
    """
    if design is None:
        design = build_design(table, layout)
    n = table.n_rows
    c = policy_contrast(layout, design, policy, baseline)
    T = float(c @ fit.beta[:, kpi])
    if method == "delta":
        cov = fitted_covariance(fit, cov_kind)[kpi]
        se = math.sqrt(max(float(c @ cov @ c), 0.0))
        z, p = _one_sided(T, se)
        return PolicyEvalResult(T, se, z, p, n, "delta")
    if method != "blb":
        raise InvalidConfig(f"unknown policy evaluation method {method!r}")
    data = RawData(design, table.Y[:, kpi], aux={
        "pi": _actions(policy, n), "pi0": _actions(baseline, n),
    })
    dist = blb_estimate(policy_statistic(layout), data, blb_config or BlbConfig(), threads=threads)
    z, p = _one_sided(T, dist.se)
    return PolicyEvalResult(T, dist.se, z, p, n, "blb", dist.ci)
