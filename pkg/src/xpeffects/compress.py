"""Lossless compression to per-design-row sufficient statistics.

A linear model only sees ``y`` through per-row cross products, so rows with
an identical design row (and cluster, when clustering) can be collapsed to
``(n_g, sum y, sum y^2)`` without changing coefficients, the homoskedastic
covariance or HC0/HC1/clustered meats: predictions are constant inside a
group, so ``sum_{i in g} (y_i - yhat_g)^2 = (S2 - S1^2/n_g) + n_g (ybar_g - yhat_g)^2``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .design import ColumnLayout, DesignSpec, build_design, build_layout
from .errors import DataError, MissingClusterIds
from .ingest import EncodedTable, Schema
from .solver import GramSystem, _cluster_indicator, accumulate_gram

MAGIC = b"XPCD"
FORMAT_VERSION = 1


@dataclass(eq=False)
class CompressedDataset:
    """One entry per distinct design row.

    ``table`` holds one representative source row per group (its KPI columns
    are the group means), ``design`` the matching ``G x p`` model rows.
    """

    table: EncodedTable
    design: sp.csr_matrix
    weights: np.ndarray  # n_g, int64
    sum_y: np.ndarray  # G x m
    sum_y_sq: np.ndarray  # G x m
    layout: ColumnLayout
    clusters: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return len(self.weights)

    @property
    def n_total(self) -> int:
        return int(self.weights.sum())

    @property
    def n_obs(self) -> float:
        return float(self.weights.sum())

    @property
    def m(self) -> int:
        return self.sum_y.shape[1]

    @property
    def kpi_names(self) -> list[str]:
        return list(self.table.kpi_names)

    @property
    def means(self) -> np.ndarray:
        return self.sum_y / self.weights[:, None]

    def gram(self, threads: int | None = None) -> GramSystem:
        g = accumulate_gram(self.design, self.means, self.weights.astype(np.float64),
                            threads=threads)
        return GramSystem(g.XtWX, np.asarray(self.design.T @ self.sum_y),
                          self.sum_y_sq.sum(axis=0), float(self.n_total), self.n_total)

    def _group_sse(self, beta) -> np.ndarray:
        n = self.weights[:, None].astype(np.float64)
        yhat = self.design @ beta
        within = self.sum_y_sq - self.sum_y ** 2 / n
        return within + n * (self.means - yhat) ** 2

    def residual_ss(self, beta) -> np.ndarray:
        return self._group_sse(beta).sum(axis=0)

    def hc_meat(self, beta) -> np.ndarray:
        sse = self._group_sse(beta)
        out = []
        for j in range(sse.shape[1]):
            Mw = sp.diags(sse[:, j]) @ self.design
            out.append(np.asarray((self.design.T @ Mw).todense()))
        return np.array(out)

    def n_clusters(self) -> int:
        if self.clusters is None:
            raise MissingClusterIds()
        return len(np.unique(self.clusters))

    def cluster_meat(self, beta) -> np.ndarray:
        if self.clusters is None:
            raise MissingClusterIds()
        C, _ = _cluster_indicator(self.clusters, self.weights)
        resid_sum = self.sum_y - self.weights[:, None] * (self.design @ beta)
        out = []
        for j in range(resid_sum.shape[1]):
            S = C @ (sp.diags(resid_sum[:, j]) @ self.design)
            out.append(np.asarray((S.T @ S).todense()))
        return np.array(out)


def _key_columns(table: EncodedTable, layout: ColumnLayout, cluster: str | None) -> list[np.ndarray]:
    cols = [table.codes[layout.spec.treatment]]
    for c in layout.spec.covariates:
        cols.append(table.numeric[c] + 0.0 if c in table.numeric else table.codes[c])
    time = layout.spec.time
    if time is not None and layout.spec.interact_treatment_time and time not in layout.spec.covariates:
        cols.append(table.codes[time])
    if cluster is not None:
        cols.append(table.codes[cluster])
    return cols


def compress(table: EncodedTable, layout: ColumnLayout, *, cluster: str | bool | None = None) -> CompressedDataset:
    """Group rows by their design row (and cluster id) and keep sufficient statistics.

    Rows are grouped on the source values that generate the design row,
    which is equivalent to grouping on the row itself (the encoding is
    injective) and far cheaper.  Numeric covariates take part bitwise, so
    near-duplicates do not merge.  Groups come out sorted by key; within a
    group rows are summed in sorted-``y`` order, which makes the output
    independent of input row order.
    """
    if cluster is True:
        cluster = table.schema.single("cluster_id")
        if cluster is None:
            raise MissingClusterIds()
    elif cluster is False:
        cluster = None
    n = table.n_rows
    keys = _key_columns(table, layout, cluster)
    sort_keys = [table.Y[:, j] for j in range(table.Y.shape[1] - 1, -1, -1)] + keys[::-1]
    order = np.lexsort(sort_keys) if n else np.zeros(0, dtype=np.intp)
    if n:
        change = np.zeros(n, dtype=bool)
        change[0] = True
        for k in keys:
            ks = k[order]
            change[1:] |= ks[1:] != ks[:-1]
        starts = np.flatnonzero(change)
    else:
        starts = np.zeros(0, dtype=np.intp)
    Ys = table.Y[order]
    if n:
        sum_y = np.add.reduceat(Ys, starts, axis=0)
        sum_y_sq = np.add.reduceat(Ys * Ys, starts, axis=0)
    else:
        sum_y = sum_y_sq = np.zeros((0, table.Y.shape[1]))
    weights = np.diff(np.append(starts, n)).astype(np.int64)
    reps = order[starts]
    gtable = table.take(reps).with_kpis(sum_y / np.maximum(weights, 1)[:, None])
    design = build_design(gtable, layout).tocsr()
    clusters = gtable.codes[cluster].copy() if cluster is not None else None
    return CompressedDataset(gtable, design, weights, sum_y, sum_y_sq, layout, clusters)


def compression_ratio(cd: CompressedDataset) -> float:
    if cd.n_groups == 0:
        return float("nan")
    return cd.n_total / cd.n_groups


# --------------------------------------------------------------------------
# on-disk format: MAGIC, u16 version, u64 header length, JSON header, then
# for each array in header order: u64 byte length + little-endian raw bytes


def _spec_to_dict(spec: DesignSpec) -> dict:
    return {
        "treatment": spec.treatment,
        "covariates": list(spec.covariates),
        "interact_treatment_covariates": spec.interact_treatment_covariates,
        "interact_treatment_time": spec.interact_treatment_time,
        "time": spec.time,
    }


def write_compressed(cd: CompressedDataset, path: str | os.PathLike) -> None:
    t = cd.table
    arrays: list[tuple[str, np.ndarray]] = []
    for k, v in t.codes.items():
        arrays.append((f"codes/{k}", v))
    for k, v in t.numeric.items():
        arrays.append((f"numeric/{k}", v))
    for k, v in t.eligible.items():
        arrays.append((f"eligible/{k}", v))
    arrays += [("weights", cd.weights), ("sum_y", cd.sum_y), ("sum_y_sq", cd.sum_y_sq)]
    if cd.clusters is not None:
        arrays.append(("clusters", cd.clusters))
    header = {
        "schema": [
            {"name": c.name, "kind": c.kind, **({"action": c.action} if c.action else {})}
            for c in t.schema.columns
        ],
        "levels": {k: list(v) for k, v in t.levels.items()},
        "design": _spec_to_dict(cd.layout.spec),
        "n_groups": cd.n_groups,
        "arrays": [
            {"name": name, "dtype": np.dtype(a.dtype).newbyteorder("<").str, "shape": list(a.shape)}
            for name, a in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name, a in arrays:
            raw = np.ascontiguousarray(a, dtype=np.dtype(a.dtype).newbyteorder("<")).tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def read_compressed(path: str | os.PathLike) -> CompressedDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise DataError("not a compressed dataset file", path=os.fspath(path))
    version, hlen = struct.unpack("<HQ", buf.read(10))
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported format version {version}", path=os.fspath(path))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    arrays = {}
    for meta in header["arrays"]:
        (nbytes,) = struct.unpack("<Q", buf.read(8))
        a = np.frombuffer(buf.read(nbytes), dtype=np.dtype(meta["dtype"]))
        arrays[meta["name"]] = a.reshape(meta["shape"]).astype(a.dtype.newbyteorder("="))
    schema = Schema.from_pairs(header["schema"])
    weights = arrays["weights"]
    sum_y = arrays["sum_y"]
    G = int(header["n_groups"])
    table = EncodedTable(
        schema=schema,
        n_rows=G,
        numeric={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("numeric/")},
        codes={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("codes/")},
        levels={k: tuple(v) for k, v in header["levels"].items()},
        Y=sum_y / np.maximum(weights, 1)[:, None],
        eligible={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("eligible/")},
    )
    d = header["design"]
    spec = DesignSpec(d["treatment"], tuple(d["covariates"]), d["interact_treatment_covariates"],
                      d["interact_treatment_time"], d["time"])
    layout = build_layout(spec, table)
    design = build_design(table, layout).tocsr()
    return CompressedDataset(table, design, weights, sum_y, arrays["sum_y_sq"], layout,
                             arrays.get("clusters"))
