import csv
import json
import math
import shutil
import subprocess

import numpy as np
import pytest

from xpeffects.cli import RunConfig, dumps, main
from xpeffects.compress import read_compressed
from xpeffects.errors import InvalidConfig
from xpeffects.ingest import write_table
from xpeffects.synthetic import SyntheticConfig, generate, iv_experiment

D1 = "a,y\nctl,1\nctl,3\ntrt,2\ntrt,6\n"


def invoke(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


def write_config(tmp_path, name="run.json", **doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture
def d1_config(tmp_path):
    (tmp_path / "d1.csv").write_text(D1, encoding="utf-8")
    return write_config(tmp_path, input="d1.csv", schema={"a": "treatment", "y": "kpi"},
                        cov_kind=["homoskedastic", "HC0"])


@pytest.fixture
def d1_named(tmp_path):
    (tmp_path / "d1.csv").write_text(D1.replace("a,y", "treatment,y"), encoding="utf-8")
    return write_config(tmp_path, input="d1.csv", schema={"treatment": "treatment", "y": "kpi"},
                        cov_kind=["homoskedastic", "HC0"])


def test_fit_d1(capsys, d1_named):
    code, doc, _ = invoke(capsys, "fit", "-c", d1_named)
    assert code == 0
    res = doc["results"]["kpis"]["y"]
    assert res["coefficients"]["treatment[trt]"] == pytest.approx(2.0, rel=1e-14)
    assert res["se"]["homoskedastic"]["treatment[trt]"] == pytest.approx(math.sqrt(5), rel=1e-14)
    assert res["se"]["HC0"]["treatment[trt]"] == pytest.approx(math.sqrt(2.5), rel=1e-14)
    assert set(doc) == {"results", "telemetry"}
    assert "timings" in doc["telemetry"]


def test_rank_deficient_exits_3(capsys, tmp_path):
    (tmp_path / "d.csv").write_text("a,x,y\nctl,a,1\nctl,a,2\ntrt,b,3\ntrt,b,5\n", encoding="utf-8")
    cfg = write_config(tmp_path, input="d.csv", schema={"a": "treatment", "x": "categorical", "y": "kpi"},
                       design={"covariates": ["x"]})
    code, doc, err = invoke(capsys, "fit", "-c", cfg)
    assert code == 3 and doc is None
    e = error_of(err)
    assert e["code"] == 3
    assert set(e["context"]["terms"]) == {"a[trt]", "x[b]"}


def test_2sls_wald(capsys, tmp_path):
    (tmp_path / "w.csv").write_text("a,z,y\n0,0,0\n1,0,1\n1,1,2\n1,1,3\n", encoding="utf-8")
    cfg = write_config(tmp_path, input="w.csv", schema={"a": "treatment", "z": "instrument", "y": "kpi"},
                       method="2sls", instruments=["z"])
    code, doc, _ = invoke(capsys, "fit", "-c", cfg)
    assert code == 0
    res = doc["results"]
    assert res["kpis"]["y"]["coefficients"]["a[1]"] == pytest.approx(4.0, rel=1e-12)
    assert "a[1]" in res["diagnostics"]["first_stage_F"]
    assert any("WeakInstrumentWarning" in w for w in res["warnings"])


def test_effects_on_d2(capsys, tmp_path):
    (tmp_path / "d2.csv").write_text("a,x,y\nctl,a,0\ntrt,a,1\nctl,b,0\ntrt,b,3\n", encoding="utf-8")
    cfg = write_config(tmp_path, input="d2.csv", schema={"a": "treatment", "x": "categorical", "y": "kpi"},
                       design={"covariates": ["x"], "interact_treatment_covariates": True},
                       effects={"segments": ["all"], "by": ["x"]})
    code, doc, _ = invoke(capsys, "effects", "-c", cfg)
    assert code == 0
    pts = {e["segment"]: e["point"] for e in doc["results"]["effects"]}
    assert pts == pytest.approx({"all": 2.0, "x=a": 1.0, "x=b": 3.0}, abs=1e-12)


@pytest.mark.parametrize("doc,flag", [
    ({"inptu": "x.csv"}, None),
    ({"design": {"covariate": []}}, None),
    ({"cov_kind": ["HC7"]}, None),
    ({}, "--bogus"),
])
def test_config_errors_exit_1(capsys, tmp_path, doc, flag):
    base = {"input": "d.csv", "schema": {"a": "treatment", "y": "kpi"}}
    base.update(doc)
    cfg = write_config(tmp_path, **base)
    argv = ["fit", "-c", cfg] + ([flag] if flag else [])
    code, _, err = invoke(capsys, *argv)
    assert code == 1
    assert error_of(err)["code"] == 1


def test_missing_config_file_is_config_error(capsys, tmp_path):
    code, _, err = invoke(capsys, "fit", "-c", tmp_path / "none.json")
    assert code == 1
    assert error_of(err)["error"] == "InvalidConfig"


def test_missing_input_is_data_error(capsys, tmp_path):
    cfg = write_config(tmp_path, input="gone.csv", schema={"a": "treatment", "y": "kpi"})
    code, _, err = invoke(capsys, "fit", "-c", cfg)
    assert code == 2
    e = error_of(err)
    assert set(e) == {"code", "error", "message", "context"}


def test_bad_value_is_data_error(capsys, tmp_path):
    (tmp_path / "d.csv").write_text("a,y\nctl,1\ntrt,x\n", encoding="utf-8")
    cfg = write_config(tmp_path, input="d.csv", schema={"a": "treatment", "y": "kpi"})
    code, _, err = invoke(capsys, "fit", "-c", cfg)
    assert code == 2
    assert error_of(err)["context"] == {"row": 2, "column": "y", "value": "x"}


def test_flags_override_config(capsys, d1_config, tmp_path):
    out = tmp_path / "report.json"
    code, _, _ = invoke(capsys, "fit", "-c", d1_config, "--cov-kind", "HC1", "--output", out)
    assert code == 0
    doc = json.loads(out.read_text())
    assert list(doc["results"]["kpis"]["y"]["se"]) == ["HC1"]


def test_policy_assignments_csv(capsys, tmp_path):
    (tmp_path / "p.csv").write_text(
        "uid,a,x,y\nu1,c,p,0\nu2,t,p,1\nu3,c,q,0\nu4,t,q,-1\nu5,c,p,0.5\nu6,t,q,-0.5\n",
        encoding="utf-8")
    cfg = write_config(tmp_path, input="p.csv",
                       schema=[{"name": "uid", "kind": "unit_id"}, {"name": "a", "kind": "treatment"},
                               {"name": "x", "kind": "categorical"}, {"name": "y", "kind": "kpi"}],
                       design={"covariates": ["x"], "interact_treatment_covariates": True},
                       policy={"assignments_out": "assign.csv"})
    code, doc, _ = invoke(capsys, "policy-eval", "-c", cfg, "--baseline", "control", "--policy", "greedy")
    assert code == 0
    res = doc["results"]
    assert res["statistic"] > 0
    assert 0 <= res["p_value"] <= 1
    rows = list(csv.reader((tmp_path / "assign.csv").open()))
    assert rows[0] == ["unit_id", "action"]
    assert dict(rows[1:]) == {"u1": "t", "u2": "t", "u3": "c", "u4": "c", "u5": "t", "u6": "c"}


def test_compress_command_writes_file(capsys, tmp_path):
    t = generate(SyntheticConfig(n=3000, covariate_levels=(4, 3), seed=1))
    write_table(t, tmp_path / "s.csv")
    cfg = write_config(tmp_path, input="s.csv", schema=dict(SyntheticConfig().schema()[:1]
                                                           + [("x0", "categorical"), ("x1", "categorical"),
                                                              ("y0", "kpi")]),
                       design={"covariates": ["x0", "x1"], "interact_treatment_covariates": True},
                       compress={"output": "s.xpcd"})
    code, doc, _ = invoke(capsys, "compress", "-c", cfg)
    assert code == 0
    assert doc["results"]["n_groups"] == 24
    assert doc["results"]["ratio"] == 125.0
    assert read_compressed(tmp_path / "s.xpcd").n_total == 3000


def test_compressed_fit_matches_raw(capsys, tmp_path):
    t = generate(SyntheticConfig(n=2000, covariate_levels=(4,), n_clusters=9, seed=2))
    write_table(t, tmp_path / "s.csv")
    schema = {"a": "treatment", "x0": "categorical", "g": "cluster_id", "y0": "kpi"}
    cfg = write_config(tmp_path, input="s.csv", schema=schema,
                       design={"covariates": ["x0"], "interact_treatment_covariates": True},
                       cov_kind=["HC1", "clustered"])
    _, raw, _ = invoke(capsys, "fit", "-c", cfg)
    _, small, _ = invoke(capsys, "fit", "-c", cfg, "--compress")
    a, b = raw["results"]["kpis"]["y0"], small["results"]["kpis"]["y0"]
    for term, v in a["coefficients"].items():
        assert b["coefficients"][term] == pytest.approx(v, rel=1e-10, abs=1e-12)
        for kind in ("HC1", "clustered"):
            assert b["se"][kind][term] == pytest.approx(a["se"][kind][term], rel=1e-10)


def test_bench_smoke(capsys):
    code, doc, _ = invoke(capsys, "bench", "--benchmark", "cates", "--n", "10000")
    assert code == 0
    res = doc["results"]
    assert res["max_rel_diff"] <= 1e-10
    assert "speedup" in doc["telemetry"]


def _synthetic_inputs(tmp_path):
    t = generate(SyntheticConfig(n=2500, n_treatments=3, covariate_levels=(3, 2), n_periods=2,
                                 n_clusters=7, n_kpis=2, seed=3))
    write_table(t, tmp_path / "s.csv")
    iv = iv_experiment(2000, 3, 4, seed=3)
    write_table(iv, tmp_path / "iv.csv")
    schema = {"a": "treatment", "x0": "categorical", "x1": "categorical", "t": "time_period",
              "g": "cluster_id", "y0": "kpi", "y1": "kpi"}
    base = dict(input="s.csv", schema=schema,
                design={"covariates": ["x0", "x1"], "interact_treatment_covariates": True,
                        "interact_treatment_time": True},
                cov_kind=["HC1", "clustered"], seed=11,
                effects={"by": ["x0"], "periods": "all"},
                blb={"resamples": 12})
    configs = {
        "fit": write_config(tmp_path, "fit.json", **base),
        "effects": write_config(tmp_path, "effects.json", **dict(base, blb={"enabled": True, "resamples": 5},
                                                                 effects={"by": ["x1"]})),
        "blb": write_config(tmp_path, "blb.json", **dict(base, effects={"treatments": ["arm1"]})),
        "compress": write_config(tmp_path, "compress.json", **dict(base, compress={"cluster": True})),
        "policy-eval": write_config(tmp_path, "policy.json", **dict(base, policy={"method": "blb"},
                                                                    effects={})),
        "bench": write_config(tmp_path, "bench.json", bench={"name": "cates", "settings": {
            "n": 3000, "naive_cates": 3}}),
        "2sls": write_config(tmp_path, "iv.json", input="iv.csv", method="2sls", instruments=["z"],
                             schema={"a": "treatment", "x": "categorical", "z": "instrument", "y": "kpi"},
                             design={"covariates": ["x"]}),
    }
    return configs


def test_results_byte_identical_across_threads(capsys, tmp_path):
    configs = _synthetic_inputs(tmp_path)
    for name, cfg in configs.items():
        command = "fit" if name == "2sls" else name
        outs = []
        for threads in ("1", "8", "1"):
            code, doc, err = invoke(capsys, command, "-c", cfg, "--threads", threads)
            assert code == 0, (name, err)
            outs.append(dumps(doc["results"]))
        assert outs[0] == outs[1] == outs[2], name


def test_threads_env_default(capsys, d1_config, monkeypatch):
    monkeypatch.setenv("XPEFFECTS_THREADS", "3")
    _, doc, _ = invoke(capsys, "fit", "-c", d1_config)
    assert doc["telemetry"]["threads"] == 3


def test_unknown_keys_rejected():
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"policy": {"basline": "control"}})
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict([1, 2])


def test_dumps_nonfinite_to_null():
    assert json.loads(dumps({"a": float("nan"), "b": np.float64(1.5), "c": np.int64(2)})) == \
        {"a": None, "b": 1.5, "c": 2}


@pytest.mark.skipif(shutil.which("xpeffects") is None, reason="console script not installed")
def test_console_script(tmp_path, d1_named):
    proc = subprocess.run(["xpeffects", "fit", "-c", str(d1_named)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["results"]["command"] == "fit"
    bad = subprocess.run(["xpeffects", "fit"], capture_output=True, text=True)
    assert bad.returncode == 1
