import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from xpeffects.design import DesignSpec, Segment, build_design, build_layout, effect_contrast, segments_by
from xpeffects.effects import (
    Z95,
    EffectEstimate,
    effect_sweep,
    estimate_effect,
    naive_counterfactual_oracle,
)
from xpeffects.errors import (
    CovKindUnavailable,
    EmptySegment,
    ReferenceLevelRequested,
    SegmentNotInModel,
    TooLargeForOracle,
)
from xpeffects.solver import CovKind, RawData, ols
from xpeffects.synthetic import SyntheticConfig, generate

from .conftest import make_table


def _fit(table, spec, kinds=(CovKind.HOMOSKEDASTIC,)):
    layout = build_layout(spec, table)
    return layout, ols(RawData.from_table(table, layout), layout, kinds)


def test_d1_ate(d1):
    layout, f = _fit(d1, DesignSpec("a"))
    e = estimate_effect(f, effect_contrast(layout, d1, "trt"))
    assert e.point == pytest.approx(2.0, rel=1e-14)
    assert e.se == pytest.approx(math.sqrt(5), rel=1e-14)
    assert naive_counterfactual_oracle(f, layout, d1, "trt") == pytest.approx(2.0, rel=1e-14)


def test_d2_cates_and_partition(d2):
    layout, f = _fit(d2, DesignSpec("a", ("x",), True))
    a = estimate_effect(f, effect_contrast(layout, d2, "trt", Segment.of(x="a")))
    b = estimate_effect(f, effect_contrast(layout, d2, "trt", Segment.of(x="b")))
    ate = estimate_effect(f, effect_contrast(layout, d2, "trt"))
    assert a.point == pytest.approx(1.0, abs=1e-14)
    assert b.point == pytest.approx(3.0, abs=1e-14)
    assert ate.point == pytest.approx(2.0, abs=1e-14)
    assert naive_counterfactual_oracle(f, layout, d2, "trt", Segment.of(x="b")) == pytest.approx(3.0)
    sweep = effect_sweep(f, layout, d2, segments=segments_by(d2, ["x"]))
    assert [e.segment for e in sweep] == ["x=a", "x=b"]
    assert_allclose([e.point for e in sweep], [1, 3], atol=1e-14)


def test_zero_variation_kpi_gives_zero(d1):
    t = make_table([("a", "treatment"), ("y", "kpi")], a=["c", "c", "t", "t"], y=[0, 0, 0, 0])
    layout, f = _fit(t, DesignSpec("a"))
    e = estimate_effect(f, effect_contrast(layout, t, "t"))
    assert e.point == 0.0
    assert math.isnan(e.z)


def test_sweep_counts_and_order():
    t = generate(SyntheticConfig(n=600, n_treatments=3, covariate_levels=(4,), n_kpis=2, seed=1))
    layout, f = _fit(t, DesignSpec("a", ("x0",), True))
    out = effect_sweep(f, layout, t, segments=segments_by(t, ["x0"]))
    assert len(out) == 16
    keys = [(e.treatment, e.segment, e.kpi) for e in out]
    assert keys == sorted(keys, key=lambda k: (layout.treatment_levels.index(k[0]), k[1], k[2]))
    single = effect_sweep(f, layout, t, treatments=["arm1"], kpis=[1])
    direct = estimate_effect(f, effect_contrast(layout, t, "arm1"), kpi=1)
    assert single[0].point == pytest.approx(direct.point, rel=1e-13)
    assert single[0].se == pytest.approx(direct.se, rel=1e-12)


def test_record_fields():
    e = EffectEstimate("y", "t", "all", None, 2.0, 0.5, 10, "HC1")
    d = e.to_dict()
    assert set(d) == {"kpi", "treatment", "segment", "period", "point", "se", "z",
                      "ci_lo", "ci_hi", "n", "cov_kind"}
    assert d["z"] == 4.0
    assert d["ci_lo"] == pytest.approx(2.0 - 1.959964 * 0.5, abs=1e-6)


def test_errors(d2):
    layout, f = _fit(d2, DesignSpec("a", ("x",), True))
    with pytest.raises(ReferenceLevelRequested):
        effect_sweep(f, layout, d2, treatments=["ctl"])
    with pytest.raises(CovKindUnavailable):
        effect_sweep(f, layout, d2, cov_kind="HC0")
    with pytest.raises(EmptySegment):
        effect_sweep(f, layout, d2, segments=[Segment.of(x="a"), Segment.of(x="zzz")])
    with pytest.raises(SegmentNotInModel):
        effect_sweep(f, layout, d2, segments=[Segment.of(a="trt")])
    with pytest.raises(TooLargeForOracle):
        naive_counterfactual_oracle(f, layout, d2, "trt", max_rows=3)


def test_single_row_segment_is_individual_effect():
    t = generate(SyntheticConfig(n=300, covariate_levels=(3,), n_numeric=1, seed=2))
    layout, f = _fit(t, DesignSpec("a", ("x0", "z0"), True))
    mask = np.zeros(t.n_rows, dtype=bool)
    mask[17] = True
    M = build_design(t, layout).toarray()
    cols, bases = layout.interactions(1)
    delta = f.beta[layout.treatment_column(1), 0] + M[17, bases] @ f.beta[cols, 0]
    assert naive_counterfactual_oracle(f, layout, t, "arm1", mask) == pytest.approx(delta, rel=1e-12)


def test_hc1_never_smaller_than_hc0():
    t = generate(SyntheticConfig(n=500, n_treatments=3, covariate_levels=(3,), seed=4))
    layout, f = _fit(t, DesignSpec("a", ("x0",), True), (CovKind.HC0, CovKind.HC1))
    segs = segments_by(t, ["x0"])
    e0 = effect_sweep(f, layout, t, segments=segs, cov_kind="HC0")
    e1 = effect_sweep(f, layout, t, segments=segs, cov_kind="HC1")
    assert all(b.se >= a.se for a, b in zip(e0, e1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_contrast_equals_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = SyntheticConfig(n=int(rng.integers(200, 1500)), n_treatments=int(rng.integers(2, 5)),
                          covariate_levels=(3, 2), n_numeric=1, n_periods=3, seed=seed)
    t = generate(cfg)
    layout, f = _fit(t, DesignSpec("a", ("x0", "x1", "z0"), True, True, "t"))
    segs = segments_by(t, ["x0"])
    periods = ["p0", "p1", "p2"]
    out = effect_sweep(f, layout, t, segments=segs, periods=periods)
    i = 0
    for level in layout.treatment_levels[1:]:
        for s in segs:
            for p in periods:
                ref = naive_counterfactual_oracle(f, layout, t, level, s, p)
                assert abs(out[i].point - ref) <= 1e-10 * max(1.0, abs(ref))
                i += 1


def test_t_test_recovery():
    rng = np.random.default_rng(0)
    y0, y1 = rng.normal(size=37), rng.normal(0.3, 1, size=55)
    t = make_table([("a", "treatment"), ("y", "kpi")],
                   a=["c"] * 37 + ["t"] * 55, y=list(y0) + list(y1))
    layout, f = _fit(t, DesignSpec("a"))
    e = estimate_effect(f, effect_contrast(layout, t, "t"))
    assert e.point == pytest.approx(y1.mean() - y0.mean(), rel=1e-12)
    sp2 = ((y0 - y0.mean()) ** 2).sum() + ((y1 - y1.mean()) ** 2).sum()
    sp2 /= len(y0) + len(y1) - 2
    tstat = (y1.mean() - y0.mean()) / math.sqrt(sp2 * (1 / len(y0) + 1 / len(y1)))
    assert e.z == pytest.approx(tstat, rel=1e-10)


def test_z95():
    assert Z95 == pytest.approx(1.959964, abs=1e-6)
