"""Batch command line front end.

Every run is described by one JSON config document; command line flags
override individual keys (flags > config file > defaults).  Relative paths
inside a config file resolve against the file's directory, paths given as
flags against the working directory.

Output is a JSON document with a deterministic ``results`` block and a
``telemetry`` block (timings, thread count).  Errors are reported on stderr
as ``{"code", "error", "message", "context"}`` with exit code 1 (config),
2 (data) or 3 (numeric).
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import __version__
from ._parallel import resolve_threads
from .bench import BENCHMARKS, run_benchmark
from .blb import BlbConfig, blb_estimate, naive_bootstrap
from .compress import compress, compression_ratio, write_compressed
from .design import DesignSpec, Segment, build_design, build_layout, segments_by
from .effects import effect_sweep, ols_effect_statistic
from .errors import CovKindUnavailable, InvalidConfig, MissingClusterIds, XpError
from .ingest import Schema, load_table
from .policy import constant_policy, evaluate_policy, greedy_policy, individual_effects
from .solver import CovKind, RawData, ols
from .tsls import fit_2sls

logger = logging.getLogger("xpeffects")

COMMANDS = ("fit", "effects", "compress", "policy-eval", "bench", "blb")

_SECTIONS = {
    "design": {"covariates": [], "interact_treatment_covariates": False,
               "interact_treatment_time": False},
    "effects": {"treatments": None, "segments": None, "by": None, "periods": None, "kpis": None},
    "blb": {"enabled": False, "gamma": 0.7, "resamples": 100, "ci_level": 0.95,
            "aggregate": "mean", "naive": False},
    "policy": {"baseline": "control", "policy": "greedy", "method": "delta", "kpi": None,
               "assignments_out": None},
    "compress": {"enabled": False, "output": None, "cluster": False},
    "bench": {"name": "cates", "settings": {}},
}
_TOP = {
    "input": None, "schema": None, "method": "ols", "instruments": [],
    "cov_kind": ["homoskedastic"], "ridge": 0.0, "seed": 0, "threads": None, "output": None,
}
_PATH_KEYS = (("input",), ("output",), ("policy", "assignments_out"), ("compress", "output"))


# --------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    """Validated run description."""

    raw: dict = field(default_factory=dict)

    def __getattr__(self, name: str) -> Any:
        if name == "raw":
            raise AttributeError(name)
        try:
            return self.raw[name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def defaults(cls) -> dict:
        out = copy.deepcopy(_TOP)
        out.update(copy.deepcopy(_SECTIONS))
        return out

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidConfig("config must be a JSON object")
        merged = cls.defaults()
        for key, value in doc.items():
            if key in _SECTIONS:
                if key == "compress" and isinstance(value, bool):
                    value = {"enabled": value}
                if not isinstance(value, dict):
                    raise InvalidConfig(f"config key {key!r} must be an object")
                unknown = set(value) - set(_SECTIONS[key])
                if unknown:
                    raise InvalidConfig(f"unknown keys in {key!r}: {sorted(unknown)}",
                                        section=key, keys=sorted(unknown))
                merged[key].update(value)
            elif key in _TOP:
                merged[key] = value
            else:
                raise InvalidConfig(f"unknown config key {key!r}", key=key)
        if base_dir:
            for path in _PATH_KEYS:
                holder = merged
                for k in path[:-1]:
                    holder = holder[k]
                v = holder[path[-1]]
                if isinstance(v, str) and not os.path.isabs(v):
                    holder[path[-1]] = os.path.join(base_dir, v)
        return cls(merged)

    def validate(self, command: str) -> "RunConfig":
        r = self.raw
        if isinstance(r["cov_kind"], str):
            r["cov_kind"] = [r["cov_kind"]]
        kinds = []
        for k in r["cov_kind"]:
            try:
                kinds.append(CovKind(k).value)
            except ValueError:
                raise InvalidConfig(f"unknown cov_kind {k!r}",
                                    choices=[c.value for c in CovKind]) from None
        if not kinds:
            raise InvalidConfig("cov_kind may not be empty")
        r["cov_kind"] = list(dict.fromkeys(kinds))
        if r["method"] not in ("ols", "2sls"):
            raise InvalidConfig(f"unknown method {r['method']!r}", choices=["ols", "2sls"])
        if r["method"] == "2sls":
            if not r["instruments"]:
                raise InvalidConfig("method 2sls needs instruments")
            if r["cov_kind"] != ["homoskedastic"]:
                raise CovKindUnavailable(",".join(k for k in r["cov_kind"] if k != "homoskedastic"))
            if r["design"]["interact_treatment_covariates"] or r["design"]["interact_treatment_time"]:
                raise InvalidConfig("method 2sls does not support treatment interactions")
            if r["compress"]["enabled"] or r["blb"]["enabled"]:
                raise InvalidConfig("method 2sls runs on raw rows without bootstrap")
        for key in ("ridge",):
            if not isinstance(r[key], (int, float)) or r[key] < 0:
                raise InvalidConfig(f"{key} must be a nonnegative number")
        if not isinstance(r["seed"], int) or r["seed"] < 0:
            raise InvalidConfig("seed must be a nonnegative integer")
        if r["threads"] is not None and (not isinstance(r["threads"], int) or r["threads"] < 1):
            raise InvalidConfig("threads must be a positive integer")
        if command != "bench":
            if not r["input"]:
                raise InvalidConfig("config needs an input path")
            if not r["schema"]:
                raise InvalidConfig("config needs a schema")
            self.schema_obj = _parse_schema(r["schema"])
        if command == "policy-eval":
            if r["method"] != "ols":
                raise InvalidConfig("policy-eval supports method ols only")
            if r["policy"]["method"] not in ("delta", "blb"):
                raise InvalidConfig("policy method must be 'delta' or 'blb'")
        if command == "bench" and r["bench"]["name"] not in BENCHMARKS:
            raise InvalidConfig(f"unknown benchmark {r['bench']['name']!r}",
                                choices=sorted(BENCHMARKS))
        if command == "blb" and r["method"] != "ols":
            raise InvalidConfig("blb supports method ols only")
        if command == "blb" or r["blb"]["enabled"]:
            self.blb_config()
        return self

    def blb_config(self) -> BlbConfig:
        b = self.raw["blb"]
        return BlbConfig(gamma=float(b["gamma"]), r=int(b["resamples"]), seed=int(self.raw["seed"]),
                         ci_level=float(b["ci_level"]), aggregate=b["aggregate"])


def _parse_schema(spec) -> Schema:
    if isinstance(spec, dict):
        spec = [{"name": k, **(v if isinstance(v, dict) else {"kind": v})} for k, v in spec.items()]
    if not isinstance(spec, list):
        raise InvalidConfig("schema must be a list of columns or a name -> kind object")
    return Schema.from_pairs(spec)


def load_config(path: str | None) -> tuple[dict, str | None]:
    if path is None:
        return {}, None
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path!r}: {exc}", path=path) from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path!r} is not valid JSON: {exc}", path=path) from exc
    return doc, os.path.dirname(os.path.abspath(path))


def apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    r = cfg.raw
    top = {"input": "input", "threads": "threads", "output": "output", "method": "method",
           "instruments": "instruments", "ridge": "ridge", "seed": "seed", "cov_kind": "cov_kind"}
    for attr, key in top.items():
        v = getattr(args, attr, None)
        if v is not None:
            r[key] = v
    nested = {
        "blb": ("blb", "enabled"), "gamma": ("blb", "gamma"), "resamples": ("blb", "resamples"),
        "bootstrap_naive": ("blb", "naive"), "baseline": ("policy", "baseline"),
        "policy": ("policy", "policy"), "policy_method": ("policy", "method"),
        "assignments_out": ("policy", "assignments_out"), "compress": ("compress", "enabled"),
        "compressed_out": ("compress", "output"), "benchmark": ("bench", "name"),
    }
    for attr, (sec, key) in nested.items():
        v = getattr(args, attr, None)
        if v is not None and v is not False:
            r[sec][key] = v
    if getattr(args, "n", None) is not None:
        r["bench"]["settings"] = dict(r["bench"]["settings"], n=args.n)
    return cfg


# --------------------------------------------------------------------------
# pipeline pieces


class _Timer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


@dataclass
class _Model:
    table: Any
    layout: Any
    fit: Any
    design: Any
    extra: dict


def _design_spec(cfg: RunConfig, schema: Schema) -> DesignSpec:
    d = cfg.design
    covs = d["covariates"]
    if isinstance(covs, str) or not isinstance(covs, list):
        raise InvalidConfig("design.covariates must be a list of column names")
    for c in covs:
        schema[c]
    return DesignSpec(schema.treatment, tuple(covs), bool(d["interact_treatment_covariates"]),
                      bool(d["interact_treatment_time"]), schema.single("time_period"))


def _fit_model(cfg: RunConfig, timer: _Timer) -> _Model:
    schema = cfg.schema_obj
    with timer("load"):
        table = load_table(cfg.input, schema)
    threads = cfg.threads
    if cfg.method == "2sls":
        covs = cfg.design["covariates"]
        with timer("fit"):
            fit = fit_2sls(table, schema.treatment, list(cfg.instruments), covs, threads=threads)
        return _Model(table, fit.layout, fit, None, {"first_stage_F": {
            name: float(f) for name, f in zip(fit.names[1:len(fit.first_stage_F) + 1],
                                              fit.first_stage_F)}})
    spec = _design_spec(cfg, schema)
    with timer("layout"):
        layout = build_layout(spec, table)
    clustered = "clustered" in cfg.cov_kind
    cluster_col = schema.single("cluster_id") if clustered else None
    if clustered and cluster_col is None:
        raise MissingClusterIds()
    extra: dict = {}
    design = None
    if cfg.compress["enabled"]:
        with timer("compress"):
            data = compress(table, layout, cluster=cluster_col)
        extra["compressed"] = {"n_groups": data.n_groups, "ratio": compression_ratio(data)}
    else:
        with timer("design"):
            design = build_design(table, layout)
            data = RawData.from_table(table, layout, cluster=cluster_col, design=design)
    with timer("fit"):
        fit = ols(data, layout, cfg.cov_kind, ridge=float(cfg.ridge), threads=threads)
    return _Model(table, layout, fit, design, extra)


def _fit_results(cfg: RunConfig, model: _Model) -> dict:
    fit = model.fit
    names = fit.names
    kpis = {}
    for j, kpi in enumerate(fit.kpi_names):
        ses = {}
        for kind, cov in fit.cov.items():
            kind = CovKind(kind).value
            ses[kind] = {n: math.sqrt(max(v, 0.0)) for n, v in zip(names, np.diag(cov[j]))}
        kpis[kpi] = {
            "coefficients": {n: float(b) for n, b in zip(names, fit.beta[:, j])},
            "se": ses,
            "sigma2": float(fit.sigma2[j]),
            "rss": float(fit.rss[j]),
        }
    out = {
        "method": cfg.method,
        "n_rows": model.table.n_rows,
        "p": len(names),
        "terms": list(names),
        "kpis": kpis,
        "diagnostics": {"df_resid": float(fit.df_resid), "ridge": float(getattr(fit, "ridge", 0.0)),
                        "cov_kinds": [CovKind(k).value for k in fit.cov]},
    }
    out["diagnostics"].update(model.extra)
    return out


def _segments(cfg: RunConfig, table) -> list[Segment]:
    e = cfg.effects
    segs: list[Segment] = []
    if e["segments"]:
        segs += [s if isinstance(s, Segment) else Segment.parse(str(s)) for s in e["segments"]]
    if e["by"]:
        segs += segments_by(table, list(e["by"]))
    return segs or [Segment()]


def _periods(cfg: RunConfig, model: _Model):
    periods = cfg.effects["periods"]
    time_col = model.layout.spec.time
    if periods is None:
        return None
    if time_col is None:
        raise InvalidConfig("effect periods need a time_period column interacted with treatment")
    if periods == "all":
        return list(model.table.levels[time_col])
    return [str(p) for p in periods]


def _kpi_indices(kpis, names) -> list[int] | None:
    if kpis is None:
        return None
    out = []
    for k in kpis:
        if k not in names:
            raise InvalidConfig(f"unknown kpi {k!r}", choices=list(names))
        out.append(list(names).index(k))
    return out


def _effects(cfg: RunConfig, model: _Model):
    kinds = cfg.cov_kind
    segs = _segments(cfg, model.table)
    periods = _periods(cfg, model)
    kpis = _kpi_indices(cfg.effects["kpis"], model.fit.kpi_names)
    design = model.design if model.design is not None else build_design(model.table, model.layout)
    return effect_sweep(model.fit, model.layout, model.table, treatments=cfg.effects["treatments"],
                        segments=segs, periods=periods, kpis=kpis, cov_kind=kinds[0], design=design)


def _blb_for_effect(cfg: RunConfig, model: _Model, design, effect, threads) -> dict:
    table, layout = model.table, model.layout
    kpi = list(model.fit.kpi_names).index(effect.kpi)
    mask = Segment.parse(effect.segment).mask(table)
    if effect.period is not None:
        t = layout.spec.time
        mask &= table.codes[t] == table.level_code(t, effect.period)
    data = RawData(design, table.Y[:, kpi], aux={"mask": mask.astype(np.float64)})
    stat = ols_effect_statistic(layout, effect.treatment, mask_key="mask")
    if cfg.blb["naive"]:
        dist = naive_bootstrap(stat, data, r=int(cfg.blb["resamples"]), seed=int(cfg.seed),
                               ci_level=float(cfg.blb["ci_level"]))
        method = "bootstrap"
    else:
        dist = blb_estimate(stat, data, cfg.blb_config(), threads=threads)
        method = "blb"
    return {"method": method, **dist.to_dict()}


# --------------------------------------------------------------------------
# commands


def cmd_fit(cfg: RunConfig, timer: _Timer) -> dict:
    model = _fit_model(cfg, timer)
    return _fit_results(cfg, model)


def cmd_effects(cfg: RunConfig, timer: _Timer) -> dict:
    model = _fit_model(cfg, timer)
    with timer("effects"):
        effects = _effects(cfg, model)
    records = [e.to_dict() for e in effects]
    if cfg.blb["enabled"]:
        design = model.design if model.design is not None else build_design(model.table, model.layout)
        with timer("blb"):
            for rec, e in zip(records, effects):
                dist = _blb_for_effect(cfg, model, design, e, cfg.threads)
                dist.pop("subsets")
                rec["bootstrap"] = dist
    return {"method": cfg.method, "n_rows": model.table.n_rows, "effects": records}


def cmd_blb(cfg: RunConfig, timer: _Timer) -> dict:
    model = _fit_model(cfg, timer)
    with timer("effects"):
        effects = _effects(cfg, model)
    design = model.design if model.design is not None else build_design(model.table, model.layout)
    out = []
    with timer("blb"):
        for e in effects:
            rec = {"kpi": e.kpi, "treatment": e.treatment, "segment": e.segment, "period": e.period}
            rec.update(_blb_for_effect(cfg, model, design, e, cfg.threads))
            out.append(rec)
    return {"n_rows": model.table.n_rows, "distributions": out}


def cmd_compress(cfg: RunConfig, timer: _Timer) -> dict:
    schema = cfg.schema_obj
    with timer("load"):
        table = load_table(cfg.input, schema)
    layout = build_layout(_design_spec(cfg, schema), table)
    cluster = schema.single("cluster_id") if cfg.compress["cluster"] else None
    if cfg.compress["cluster"] and cluster is None:
        raise MissingClusterIds()
    with timer("compress"):
        cd = compress(table, layout, cluster=cluster)
    out = {"n_rows": table.n_rows, "n_groups": cd.n_groups, "ratio": compression_ratio(cd),
           "p": layout.p, "clustered": cluster is not None}
    if cfg.compress["output"]:
        with timer("write"):
            write_compressed(cd, cfg.compress["output"])
        out["written"] = os.path.basename(cfg.compress["output"])
    return out


def _write_assignments(path: str, table, assignment) -> None:
    unit = table.schema.single("unit_id")
    ids = table.decode(unit) if unit is not None else np.arange(1, table.n_rows + 1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit_id", "action"])
    for uid, action in zip(ids, assignment.labels()):
        w.writerow([uid, action])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _resolve_policy(name: str, model: _Model, effects):
    levels = model.layout.treatment_levels
    if name == "control" and "control" not in levels:
        name = levels[0]
    if name == "greedy":
        return greedy_policy(effects)
    if name not in levels:
        raise InvalidConfig(f"unknown policy {name!r}; use 'greedy', 'control' or a treatment level",
                            choices=["greedy", "control", *levels])
    return constant_policy(name, model.layout, model.table.n_rows)


def cmd_policy_eval(cfg: RunConfig, timer: _Timer) -> dict:
    model = _fit_model(cfg, timer)
    p = cfg.policy
    kpi = 0 if p["kpi"] is None else _kpi_indices([p["kpi"]], model.fit.kpi_names)[0]
    design = model.design if model.design is not None else build_design(model.table, model.layout)
    with timer("policy"):
        effects = individual_effects(model.fit, model.layout, model.table, kpi=kpi, design=design)
        pi = _resolve_policy(p["policy"], model, effects)
        pi0 = _resolve_policy(p["baseline"], model, effects)
        result = evaluate_policy(model.fit, model.layout, model.table, pi, pi0, cfg.cov_kind[0],
                                 kpi=kpi, design=design, method=p["method"],
                                 blb_config=cfg.blb_config() if p["method"] == "blb" else None,
                                 threads=cfg.threads)
    out = result.to_dict()
    out.update(kpi=model.fit.kpi_names[kpi], policy=p["policy"], baseline=p["baseline"],
               cov_kind=cfg.cov_kind[0] if p["method"] == "delta" else None,
               action_counts={lv: int(c) for lv, c in zip(
                   model.layout.treatment_levels,
                   np.bincount(pi.actions, minlength=model.layout.n_treatments))})
    if p["assignments_out"]:
        _write_assignments(p["assignments_out"], model.table, pi)
    return out


_VOLATILE = ("phases", "speedup", "peak_bytes", "peak_over_input")


def cmd_bench(cfg: RunConfig, timer: _Timer) -> tuple[dict, dict]:
    settings = dict(cfg.bench["settings"])
    settings.setdefault("seed", cfg.seed)
    if cfg.threads is not None and "threads" not in settings:
        settings["threads"] = cfg.threads
    with timer("bench"):
        report = run_benchmark(cfg.bench["name"], **settings)
    results = {"benchmark": cfg.bench["name"]}
    telemetry = {}
    for k, v in report.items():
        if k in _VOLATILE or k.endswith("_s"):
            telemetry[k] = v
        else:
            results[k] = v
    return results, telemetry


_HANDLERS = {
    "fit": cmd_fit,
    "effects": cmd_effects,
    "blb": cmd_blb,
    "compress": cmd_compress,
    "policy-eval": cmd_policy_eval,
    "bench": cmd_bench,
}


# --------------------------------------------------------------------------
# output


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(doc: dict) -> str:
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def run(command: str, cfg: RunConfig) -> dict:
    """Execute one command; returns the full output document."""
    cfg.validate(command)
    timer = _Timer()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = _HANDLERS[command](cfg, timer)
    telemetry: dict = {}
    if isinstance(out, tuple):
        out, telemetry = out
    msgs = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    for m in msgs:
        logger.warning(m)
    results = {"command": command, **out}
    if msgs:
        results["warnings"] = msgs
    telemetry.update(timings=timer.timings, threads=resolve_threads(cfg.threads), version=__version__)
    return {"results": results, "telemetry": telemetry}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidConfig(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xpeffects", description="Treatment effect estimation for experiment data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("-c", "--config", help="JSON run config")
        s.add_argument("--input")
        s.add_argument("--output", help="write the report here instead of stdout")
        s.add_argument("--threads", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "bench":
            s.add_argument("--benchmark", choices=sorted(BENCHMARKS))
            s.add_argument("--n", type=int)
            continue
        s.add_argument("--cov-kind", dest="cov_kind", nargs="+")
        s.add_argument("--method", choices=["ols", "2sls"])
        s.add_argument("--instruments", nargs="+")
        s.add_argument("--ridge", type=float)
        s.add_argument("--compress", action="store_true", default=None)
        if name == "compress":
            s.add_argument("--compressed-out", dest="compressed_out")
        if name in ("effects", "blb", "policy-eval"):
            s.add_argument("--blb", action="store_true", default=None)
            s.add_argument("--gamma", type=float)
            s.add_argument("--resamples", type=int)
            s.add_argument("--bootstrap-naive", dest="bootstrap_naive", action="store_true", default=None)
        if name == "policy-eval":
            s.add_argument("--baseline")
            s.add_argument("--policy")
            s.add_argument("--policy-method", dest="policy_method", choices=["delta", "blb"])
            s.add_argument("--assignments-out", dest="assignments_out")
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logger.setLevel(logging.INFO)
        doc, base = load_config(args.config)
        cfg = apply_flags(RunConfig.from_dict(doc, base), args)
        out = run(args.command, cfg)
        text = dumps(out)
        if cfg.output:
            with open(cfg.output, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return 0
    except XpError as exc:
        err = exc.to_dict()
    except OSError as exc:
        err = {"code": 2, "error": type(exc).__name__, "message": str(exc), "context": {}}
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        err = {"code": 3, "error": type(exc).__name__, "message": str(exc), "context": {}}
    sys.stderr.write(json.dumps(_clean(err), sort_keys=True) + "\n")
    return err["code"]


if __name__ == "__main__":
    sys.exit(main())
