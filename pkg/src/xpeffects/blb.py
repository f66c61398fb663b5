"""Bag of little bootstraps.

Rows are shuffled (seeded) and cut into ``s = ceil(n / b)`` contiguous
subsets of size ``b = ceil(n ** gamma)``.  Inside a subset every resample is
a multinomial count vector over its rows summing to ``n``, so a resample is
a weight vector for the weighted-fit machinery, never a copy of rows.  Each
subset yields a standard error and a centered percentile interval; these
are averaged (or median-aggregated) across subsets.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from ._parallel import ordered_map
from .errors import DataError, DegenerateSubset, InvalidConfig, StatisticFailed

logger = logging.getLogger(__name__)

# spawn-key tags for the independent RNG streams
_PARTITION = 0
_RESAMPLE = 1


@dataclass(frozen=True)
class BlbConfig:
    gamma: float = 0.7
    r: int = 100
    seed: int = 0
    ci_level: float = 0.95
    aggregate: str = "mean"  # or "median"

    def __post_init__(self):
        if not 0.5 <= self.gamma <= 1.0:
            raise InvalidConfig("gamma must lie in [0.5, 1]", gamma=self.gamma)
        if self.r < 2:
            raise InvalidConfig("need at least 2 resamples per subset", r=self.r)
        if not 0.0 < self.ci_level < 1.0:
            raise InvalidConfig("ci_level must lie in (0, 1)", ci_level=self.ci_level)
        if self.aggregate not in ("mean", "median"):
            raise InvalidConfig("aggregate must be 'mean' or 'median'")

    def subset_size(self, n: int) -> int:
        return max(1, math.ceil(n ** self.gamma))

    def n_subsets(self, n: int) -> int:
        return math.ceil(n / self.subset_size(n))


@dataclass(frozen=True)
class SubsetResult:
    index: int
    size: int
    point: float
    se: float
    ci: tuple[float, float]


@dataclass(frozen=True)
class DistributionEstimate:
    point: float
    se: float
    ci: tuple[float, float]
    subsets: list[SubsetResult] = field(default_factory=list)
    config: BlbConfig = field(default_factory=BlbConfig)
    n_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "se": self.se,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "n_subsets": len(self.subsets),
            "n_skipped": self.n_skipped,
            "subsets": [
                {"index": s.index, "size": s.size, "point": s.point, "se": s.se,
                 "ci_lo": s.ci[0], "ci_hi": s.ci[1]}
                for s in self.subsets
            ],
            "config": asdict(self.config),
        }


def multinomial_weights(b: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Counts of ``n`` draws with replacement from ``b`` rows.

    Both branches sample Multinomial(n, 1/b) exactly: tallying ``n`` uniform
    row indices is cheaper while ``n`` is small relative to ``b``, the
    binomial chain (cost linear in ``b``) otherwise.
    """
    if b < 1:
        raise InvalidConfig("subset size must be positive", b=b)
    if n <= 32 * b:
        return np.bincount(rng.integers(0, b, size=n), minlength=b).astype(np.int64)
    return rng.multinomial(n, np.full(b, 1.0 / b)).astype(np.int64)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _take(data, rows):
    if hasattr(data, "subset"):
        return data.subset(rows)
    return data[rows]


def _size(data) -> int:
    return len(data)


def _quantiles(values: np.ndarray, alpha: float) -> np.ndarray:
    # median-unbiased order-statistic quantiles; linear interpolation puts the
    # tails of ~100 resamples visibly inside the true quantiles
    return np.quantile(values, [alpha / 2, 1 - alpha / 2], method="median_unbiased")


def partition(n: int, config: BlbConfig) -> list[np.ndarray]:
    b = config.subset_size(n)
    perm = _stream(config.seed, _PARTITION).permutation(n)
    return [np.sort(perm[i:i + b]) for i in range(0, n, b)]


def subset_resamples(statistic: Callable[[Any, np.ndarray], float], sub, n: int,
                     config: BlbConfig, index: int) -> np.ndarray:
    """The ``r`` resample statistics of one subset.

    All draws for subset ``index`` come from one stream keyed by
    ``(seed, index)``, consumed in resample order.
    """
    rng = _stream(config.seed, _RESAMPLE, index)
    b = _size(sub)
    out = np.empty(config.r)
    for k in range(config.r):
        w = multinomial_weights(b, n, rng)
        try:
            out[k] = statistic(sub, w)
        except DegenerateSubset:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise StatisticFailed(
                f"statistic failed on subset {index}, resample {k}: {exc}",
                subset=index, resample=k,
            ) from exc
    return out


def blb_estimate(statistic: Callable[[Any, np.ndarray], float], data, config: BlbConfig | None = None,
                 *, threads: int | None = None) -> DistributionEstimate:
    """Sampling distribution summary of ``statistic`` by bag of little bootstraps.

    ``statistic(data, weights)`` must return a float and treat ``weights`` as
    frequency weights; ``data`` is an array (row-indexed) or an object with
    ``subset(rows)``.  A subset whose statistic raises
    :class:`DegenerateSubset` is skipped with a warning.

    The reported interval is ``point + q`` where ``q`` are the subset-averaged
    quantiles of the centered resample statistics, widened if needed so that
    it always contains ``point``.
    """
    config = config or BlbConfig()
    n = _size(data)
    if n < 1:
        raise DataError("no rows to bootstrap")
    point = float(statistic(data, np.ones(n, dtype=np.int64)))
    subsets = partition(n, config)
    alpha = 1.0 - config.ci_level

    def run(item):
        j, rows = item
        sub = _take(data, rows)
        try:
            plug_in = float(statistic(sub, np.full(len(rows), n / len(rows))))
        except DegenerateSubset as exc:
            return j, len(rows), None, str(exc)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise StatisticFailed(f"statistic failed on subset {j}: {exc}", subset=j) from exc
        try:
            stats = subset_resamples(statistic, sub, n, config, j)
        except DegenerateSubset as exc:
            return j, len(rows), None, str(exc)
        centered = stats - plug_in
        q = _quantiles(centered, alpha)
        return j, len(rows), (plug_in, float(stats.std(ddof=1)), float(q[0]), float(q[1])), None

    results = ordered_map(run, list(enumerate(subsets)), threads)
    kept: list[SubsetResult] = []
    lows, highs = [], []
    skipped = 0
    for j, size, res, why in results:
        if res is None:
            skipped += 1
            warnings.warn(f"skipping degenerate subset {j}: {why}", RuntimeWarning, stacklevel=2)
            continue
        plug_in, se, qlo, qhi = res
        kept.append(SubsetResult(j, size, plug_in, se, (plug_in + qlo, plug_in + qhi)))
        lows.append(qlo)
        highs.append(qhi)
    if not kept:
        raise DegenerateSubset("every bootstrap subset was degenerate", n_subsets=len(subsets))
    agg = np.mean if config.aggregate == "mean" else np.median
    se = float(agg([s.se for s in kept]))
    lo = point + min(float(agg(lows)), 0.0)
    hi = point + max(float(agg(highs)), 0.0)
    return DistributionEstimate(point, se, (lo, hi), kept, config, skipped)


def naive_bootstrap(statistic, data, r: int = 100, seed: int = 0, ci_level: float = 0.95,
                    max_rows: int = 10**5) -> DistributionEstimate:
    """Plain ``n``-out-of-``n`` bootstrap, guarded to small inputs (tests only)."""
    n = _size(data)
    if n > max_rows:
        raise DataError(f"naive bootstrap limited to {max_rows} rows", n=n)
    point = float(statistic(data, np.ones(n, dtype=np.int64)))
    rng = _stream(seed, 2)
    stats = np.array([statistic(data, multinomial_weights(n, n, rng)) for _ in range(r)])
    alpha = 1 - ci_level
    q = _quantiles(stats - point, alpha)
    cfg = BlbConfig(gamma=1.0, r=max(r, 2), seed=seed, ci_level=ci_level)
    return DistributionEstimate(point, float(stats.std(ddof=1)),
                                (point + min(q[0], 0.0), point + max(q[1], 0.0)), [], cfg, 0)
