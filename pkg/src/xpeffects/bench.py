"""Benchmark harness: wall time and peak traced memory per phase.

Three benchmarks, each on synthetic data:

* ``cates``: many segment effects through contrast vectors versus the
  dense counterfactual-matrix path.  The naive path is timed on a few
  segments and its per-CATE cost extrapolated, and it is skipped entirely
  above a row guard.
* ``compression``: a fit on per-design-row sufficient statistics versus the
  same fit on raw rows.
* ``tsls``: peak memory of Gram-composed 2SLS against the sparse footprint
  of its input matrix.
"""
from __future__ import annotations

import time
import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .compress import compress, compression_ratio
from .design import DesignSpec, build_design, build_design_rows, build_layout, segments_by, sparse_nbytes
from .effects import ORACLE_MAX_ROWS, effect_sweep, naive_counterfactual_oracle
from .errors import InvalidConfig
from .solver import CovKind, RawData, ols
from .synthetic import TREATMENT, SyntheticConfig, generate, iv_experiment
from .tsls import fit_2sls


@dataclass
class PhaseTimer:
    """Records ``wall_s`` (and ``peak_bytes`` when tracking memory) per named phase."""

    track_memory: bool = False
    phases: dict = field(default_factory=dict)

    @contextmanager
    def phase(self, name: str):
        if self.track_memory:
            started_here = not tracemalloc.is_tracing()
            if started_here:
                tracemalloc.start()
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
        t0 = time.perf_counter()
        try:
            yield
        finally:
            rec = {"wall_s": time.perf_counter() - t0}
            if self.track_memory:
                rec["peak_bytes"] = tracemalloc.get_traced_memory()[1] - base
                if started_here:
                    tracemalloc.stop()
            self.phases[name] = rec

    def wall(self, *names: str) -> float:
        return sum(self.phases[n]["wall_s"] for n in names)


def _max_rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.abs(b).max()), np.finfo(float).tiny)
    return float(np.abs(a - b).max() / scale)


def cate_benchmark(n: int = 10**5, *, covariate_levels=(10,) * 11, segment_columns=("x0", "x1", "x2"),
                   naive_cates: int | None = 5, naive_max_rows: int = ORACLE_MAX_ROWS,
                   seed: int = 0, threads: int | None = None) -> dict:
    """Segment effects by contrast vectors, optionally against the dense path.

    ``naive_cates`` segments (``None`` = all) run through the oracle; its
    total for every segment is extrapolated from the mean per-segment time.
    """
    cfg = SyntheticConfig(n=n, covariate_levels=tuple(covariate_levels), seed=seed)
    timer = PhaseTimer()
    with timer.phase("generate"):
        table = generate(cfg)
    layout = build_layout(DesignSpec(TREATMENT, tuple(cfg.covariate_names), True), table)
    with timer.phase("design"):
        M = build_design(table, layout)
    with timer.phase("fit"):
        fit = ols(RawData(M, table.Y), layout, [CovKind.HOMOSKEDASTIC], threads=threads)
    segments = segments_by(table, list(segment_columns))
    with timer.phase("contrast_effects"):
        effects = effect_sweep(fit, layout, table, segments=segments, design=M)
    level = layout.treatment_levels[1]
    report = {
        "n": n, "p": layout.p, "n_cates": len(segments),
        "contrast_s": timer.wall("design", "fit", "contrast_effects"),
        "phases": timer.phases,
    }
    if naive_cates == 0 or n > naive_max_rows:
        report.update(naive_skipped=True, naive_s=None, speedup=None, max_rel_diff=None)
        return report
    todo = len(segments) if naive_cates is None else min(naive_cates, len(segments))
    # spread the timed subsample over the whole segment grid
    picks = np.unique(np.linspace(0, len(segments) - 1, todo).round().astype(int))
    naive = []
    with timer.phase("naive_effects"):
        for i in picks:
            naive.append(naive_counterfactual_oracle(fit, layout, table, level, segments[i],
                                                     max_rows=naive_max_rows))
    per_cate = timer.wall("naive_effects") / len(picks)
    naive_total = timer.wall("design", "fit") + per_cate * len(segments)
    report.update(
        naive_skipped=False,
        naive_timed_cates=len(picks),
        naive_s=naive_total,
        naive_extrapolated=len(picks) < len(segments),
        speedup=naive_total / report["contrast_s"],
        max_rel_diff=_max_rel([effects[i].point for i in picks], naive),
    )
    return report


def compression_benchmark(n: int = 10**6, *, levels: int = 100, n_treatments: int = 2,
                          seed: int = 0, threads: int | None = None) -> dict:
    """Fit time on compressed versus raw rows (``levels * n_treatments`` design rows)."""
    cfg = SyntheticConfig(n=n, n_treatments=n_treatments, covariate_levels=(levels,), seed=seed)
    table = generate(cfg)
    layout = build_layout(DesignSpec(TREATMENT, ("x0",), True), table)
    timer = PhaseTimer()
    with timer.phase("raw_design"):
        M = build_design(table, layout)
    with timer.phase("raw_fit"):
        raw = ols(RawData(M, table.Y), layout, [CovKind.HOMOSKEDASTIC, CovKind.HC0], threads=threads)
    with timer.phase("compress"):
        cd = compress(table, layout)
    with timer.phase("compressed_fit"):
        small = ols(cd, layout, [CovKind.HOMOSKEDASTIC, CovKind.HC0], threads=threads)
    return {
        "n": n, "p": layout.p, "n_groups": cd.n_groups, "ratio": compression_ratio(cd),
        "raw_fit_s": timer.wall("raw_fit"),
        "compressed_fit_s": timer.wall("compressed_fit"),
        "compress_s": timer.wall("compress"),
        "speedup": timer.wall("raw_fit") / timer.wall("compressed_fit"),
        "max_rel_diff_beta": _max_rel(small.beta, raw.beta),
        "phases": timer.phases,
    }


def tsls_memory_benchmark(n: int = 10**6, *, n_treatments: int = 4, n_instrument_levels: int = 8,
                          seed: int = 0, threads: int | None = 1) -> dict:
    """Peak traced memory of :func:`fit_2sls` relative to its sparse input matrix.

    A dense ``n x (K-1)`` fitted-treatment array would by itself cost
    ``8 n (K-1)`` bytes; the report states both numbers.
    """
    table = iv_experiment(n, n_treatments, n_instrument_levels, seed=seed)
    layout_c = build_layout(DesignSpec("a", ("x", "z")), table)
    footprint = sparse_nbytes(build_design_rows(table, layout_c))
    timer = PhaseTimer(track_memory=True)
    with timer.phase("fit_2sls"):
        fit = fit_2sls(table, "a", ["z"], ["x"], threads=threads)
    peak = timer.phases["fit_2sls"]["peak_bytes"]
    return {
        "n": n, "K": n_treatments, "p": fit.beta.shape[0],
        "sparse_input_bytes": footprint,
        "peak_bytes": peak,
        "peak_over_input": peak / footprint,
        "dense_fitted_treatment_bytes": 8 * n * (n_treatments - 1),
        "first_stage_F": [float(f) for f in fit.first_stage_F],
        "phases": timer.phases,
    }


BENCHMARKS = {
    "cates": cate_benchmark,
    "compression": compression_benchmark,
    "tsls": tsls_memory_benchmark,
}


def run_benchmark(name: str, **kwargs) -> dict:
    if name not in BENCHMARKS:
        raise InvalidConfig(f"unknown benchmark {name!r}", choices=sorted(BENCHMARKS))
    try:
        return BENCHMARKS[name](**kwargs)
    except TypeError as exc:
        raise InvalidConfig(f"bad settings for benchmark {name!r}: {exc}") from exc

