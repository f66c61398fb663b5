"""Synthetic randomized experiments for tests and benchmarks.

Outcomes follow an additive model with heterogeneous effects::

    y = sum_j base_j[x_j] + tau0[a] + sum_j tau_j[a, x_j] + z' g + period[t] + u[cluster] + e

so a design with treatment-covariate interactions is correctly specified.
Generated tables come straight out of :meth:`EncodedTable.from_codes`; no
text round trip is involved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import EncodedTable

TREATMENT = "a"
TIME = "t"
CLUSTER = "g"


def _levels(prefix: str, k: int) -> tuple[str, ...]:
    width = len(str(max(k - 1, 0)))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(k))


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 10_000
    n_treatments: int = 2
    covariate_levels: tuple[int, ...] = (4, 3)
    n_numeric: int = 0
    n_periods: int = 0
    n_clusters: int = 0
    n_kpis: int = 1
    effect: float = 1.0
    heterogeneity: float = 0.5
    noise: float = 1.0
    treat_prob: tuple[float, ...] | None = None
    seed: int = 0

    @property
    def covariate_names(self) -> list[str]:
        return [f"x{j}" for j in range(len(self.covariate_levels))]

    @property
    def numeric_names(self) -> list[str]:
        return [f"z{j}" for j in range(self.n_numeric)]

    @property
    def kpi_names(self) -> list[str]:
        return [f"y{j}" for j in range(self.n_kpis)]

    def schema(self) -> list[tuple[str, str]]:
        cols = [(TREATMENT, "treatment")]
        cols += [(c, "categorical") for c in self.covariate_names]
        cols += [(c, "numeric") for c in self.numeric_names]
        if self.n_periods:
            cols.append((TIME, "time_period"))
        if self.n_clusters:
            cols.append((CLUSTER, "cluster_id"))
        cols += [(c, "kpi") for c in self.kpi_names]
        return cols


def generate(config: SyntheticConfig) -> EncodedTable:
    """Draw one experiment; treatment is assigned independently of covariates."""
    rng = np.random.default_rng(config.seed)
    n, K = config.n, config.n_treatments
    probs = np.full(K, 1.0 / K) if config.treat_prob is None else np.asarray(config.treat_prob)
    a = rng.choice(K, size=n, p=probs / probs.sum())
    codes = {TREATMENT: a}
    levels = {TREATMENT: _levels("arm", K)}
    m = config.n_kpis
    tau0 = config.effect * rng.normal(size=(K, m))
    tau0[0] = 0.0
    mu = np.zeros((n, m))
    mu += tau0[a]
    for name, L in zip(config.covariate_names, config.covariate_levels):
        x = rng.integers(0, L, size=n)
        codes[name] = x
        levels[name] = _levels("l", L)
        base = rng.normal(size=(L, m))
        tau = config.heterogeneity * rng.normal(size=(K, L, m))
        tau[0] = 0.0
        mu += base[x] + tau[a, x]
    numeric = {}
    for name in config.numeric_names:
        z = rng.normal(size=n)
        numeric[name] = z
        mu += np.outer(z, rng.normal(size=m))
    if config.n_periods:
        t = rng.integers(0, config.n_periods, size=n)
        codes[TIME] = t
        levels[TIME] = _levels("p", config.n_periods)
        mu += rng.normal(size=(config.n_periods, m))[t]
    if config.n_clusters:
        g = rng.integers(0, config.n_clusters, size=n)
        codes[CLUSTER] = g
        levels[CLUSTER] = _levels("c", config.n_clusters)
        mu += 0.5 * rng.normal(size=(config.n_clusters, m))[g]
    Y = mu + config.noise * rng.normal(size=(n, m))
    kpis = {name: Y[:, j] for j, name in enumerate(config.kpi_names)}
    return EncodedTable.from_codes(config.schema(), codes=codes, levels=levels,
                                   numeric=numeric, kpis=kpis)


def two_group(n_control: int, n_treated: int, *, shift: float = 0.0, seed: int = 0) -> EncodedTable:
    """Two arms with normal outcomes and no covariates."""
    rng = np.random.default_rng(seed)
    a = np.r_[np.zeros(n_control, dtype=np.int64), np.ones(n_treated, dtype=np.int64)]
    y = rng.normal(size=len(a)) + shift * a
    return EncodedTable.from_codes([(TREATMENT, "treatment"), ("y", "kpi")],
                                   codes={TREATMENT: a}, levels={TREATMENT: ("control", "treated")},
                                   kpis={"y": y})


def iv_experiment(n: int, n_treatments: int = 2, n_instrument_levels: int = 4, *,
                  effect: float = 1.0, compliance: float = 0.7, seed: int = 0) -> EncodedTable:
    """Encouragement design with an unobserved confounder.

    The instrument ``z`` shifts which arm is taken; ``u`` drives both take-up
    and the outcome, so OLS on ``a`` is biased while 2SLS is not.
    """
    rng = np.random.default_rng(seed)
    K, Lz = n_treatments, n_instrument_levels
    z = rng.integers(0, Lz, size=n)
    u = rng.normal(size=n)
    pull = np.minimum(z % K + (u > 0.5), K - 1)
    a = np.where(rng.random(n) < compliance, pull, rng.integers(0, K, size=n))
    x = rng.integers(0, 5, size=n)
    y = effect * a + 0.3 * x + u + rng.normal(size=n)
    return EncodedTable.from_codes(
        [(TREATMENT, "treatment"), ("x", "categorical"), ("z", "instrument"), ("y", "kpi")],
        codes={TREATMENT: a, "x": x, "z": z},
        levels={TREATMENT: _levels("arm", K), "x": _levels("l", 5), "z": _levels("z", Lz)},
        kpis={"y": y},
    )
