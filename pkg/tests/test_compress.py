import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from xpeffects.compress import compress, compression_ratio, read_compressed, write_compressed
from xpeffects.design import DesignSpec, build_layout
from xpeffects.errors import DataError, MissingClusterIds
from xpeffects.ingest import EncodedTable
from xpeffects.solver import CovKind, RawData, ols
from xpeffects.synthetic import SyntheticConfig, generate

from .oracles import rel_err

KINDS = [CovKind.HOMOSKEDASTIC, CovKind.HC0, CovKind.HC1]


def test_d1_groups(d1):
    layout = build_layout(DesignSpec("a"), d1)
    cd = compress(d1, layout)
    assert cd.n_groups == 2
    assert_array_equal(cd.weights, [2, 2])
    assert_array_equal(cd.sum_y[:, 0], [4, 8])
    assert_array_equal(cd.sum_y_sq[:, 0], [10, 40])
    assert compression_ratio(cd) == 2.0


def test_d1_compressed_gram_equals_raw(d1):
    layout = build_layout(DesignSpec("a"), d1)
    g_raw = RawData.from_table(d1, layout).gram()
    g_cmp = compress(d1, layout).gram()
    assert_array_equal(g_raw.XtWX, g_cmp.XtWX)
    assert_array_equal(g_raw.XtWY, g_cmp.XtWY)


def test_distinct_numeric_no_compression():
    t = generate(SyntheticConfig(n=50, covariate_levels=(), n_numeric=1, seed=1))
    layout = build_layout(DesignSpec("a", ("z0",)), t)
    cd = compress(t, layout)
    assert cd.n_groups == 50
    assert (cd.weights == 1).all()
    assert compression_ratio(cd) == 1.0


def test_eight_cells():
    rng = np.random.default_rng(0)
    n = 10**5
    t = EncodedTable.from_codes(
        [("a", "treatment"), ("country", "categorical"), ("y", "kpi")],
        codes={"a": rng.integers(0, 2, n), "country": rng.integers(0, 4, n)},
        levels={"a": ("c", "t"), "country": ("de", "fr", "jp", "us")},
        kpis={"y": rng.normal(size=n)},
    )
    cd = compress(t, build_layout(DesignSpec("a", ("country",), True), t))
    assert cd.n_groups == 8
    assert cd.n_total == n
    assert compression_ratio(cd) == 12500.0


def _instance(seed, n):
    rng = np.random.default_rng(seed)
    cfg = SyntheticConfig(n=n, n_treatments=int(rng.integers(2, 4)), covariate_levels=(5, 3),
                          n_clusters=6, n_kpis=2, seed=seed)
    t = generate(cfg)
    layout = build_layout(DesignSpec("a", ("x0", "x1"), bool(rng.integers(0, 2))), t)
    return t, layout


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_lossless(seed):
    t, layout = _instance(seed, 2000)
    raw = ols(RawData.from_table(t, layout, cluster="g"), layout, KINDS + [CovKind.CLUSTERED])
    cd = compress(t, layout, cluster=True)
    small = ols(cd, layout, KINDS + [CovKind.CLUSTERED])
    assert rel_err(small.beta, raw.beta) <= 1e-10
    assert rel_err(small.rss, raw.rss) <= 1e-10
    for kind in raw.cov:
        assert rel_err(small.cov[kind], raw.cov[kind]) <= 1e-10
    assert cd.n_total == t.n_rows
    assert_array_equal(np.round(cd.sum_y.sum(axis=0), 8), np.round(t.Y.sum(axis=0), 8))
    assert (cd.sum_y_sq >= cd.sum_y ** 2 / cd.weights[:, None] - 1e-9).all()


def test_invariants_and_permutation():
    t, layout = _instance(3, 3000)
    cd = compress(t, layout)
    design = cd.design.toarray()
    assert len({row.tobytes() for row in design}) == cd.n_groups
    perm = np.random.default_rng(9).permutation(t.n_rows)
    cd2 = compress(t.take(perm), layout)
    assert cd2.weights.tobytes() == cd.weights.tobytes()
    assert cd2.sum_y.tobytes() == cd.sum_y.tobytes()
    assert cd2.sum_y_sq.tobytes() == cd.sum_y_sq.tobytes()
    assert (cd2.design != cd.design).nnz == 0


def test_clusters_never_merged():
    t, layout = _instance(4, 2000)
    cd = compress(t, layout, cluster="g")
    keys = {(row.tobytes(), g) for row, g in zip(cd.design.toarray(), cd.clusters)}
    assert len(keys) == cd.n_groups
    assert cd.n_groups > compress(t, layout).n_groups


def test_cluster_flag_needs_column(d1):
    with pytest.raises(MissingClusterIds):
        compress(d1, build_layout(DesignSpec("a"), d1), cluster=True)


def test_file_round_trip(tmp_path):
    t, layout = _instance(5, 1500)
    cd = compress(t, layout, cluster="g")
    path = tmp_path / "c.xpcd"
    write_compressed(cd, path)
    back = read_compressed(path)
    assert back.layout.names == layout.names
    assert_array_equal(back.weights, cd.weights)
    assert back.sum_y.tobytes() == cd.sum_y.tobytes()
    assert back.sum_y_sq.tobytes() == cd.sum_y_sq.tobytes()
    assert_array_equal(back.clusters, cd.clusters)
    assert (back.design != cd.design).nnz == 0
    a = ols(cd, layout, [CovKind.CLUSTERED])
    b = ols(back, back.layout, [CovKind.CLUSTERED])
    assert a.beta.tobytes() == b.beta.tobytes()


def test_bad_file(tmp_path):
    p = tmp_path / "x.xpcd"
    p.write_bytes(b"nope")
    with pytest.raises(DataError):
        read_compressed(p)
