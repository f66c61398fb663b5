"""Treatment effect estimation for randomized experiments on sparse designs."""
from __future__ import annotations

__version__ = "0.1.0"

from .blb import BlbConfig, DistributionEstimate, blb_estimate, multinomial_weights
from .compress import CompressedDataset, compress, compression_ratio, read_compressed, write_compressed
from .design import (
    ColumnLayout,
    ContrastVector,
    DesignSpec,
    Segment,
    build_design,
    build_layout,
    effect_contrast,
    segments_by,
)
from .effects import EffectEstimate, effect_sweep, estimate_effect, naive_counterfactual_oracle
from .errors import (
    ConfigError,
    DataError,
    NumericError,
    RankDeficient,
    WeakInstrumentWarning,
    XpError,
)
from .ingest import ColumnSpec, EncodedTable, Schema, load_table, summarize
from .policy import (
    PolicyAssignment,
    PolicyEvalResult,
    constant_policy,
    evaluate_policy,
    greedy_policy,
    individual_effects,
)
from .solver import CovKind, FitResult, GramSystem, RawData, accumulate_gram, covariance, fit, ols
from .tsls import TslsFit, dense_2sls_oracle, fit_2sls

__all__ = [
    "BlbConfig", "DistributionEstimate", "blb_estimate", "multinomial_weights",
    "CompressedDataset", "compress", "compression_ratio", "read_compressed", "write_compressed",
    "ColumnLayout", "ContrastVector", "DesignSpec", "Segment", "build_design", "build_layout",
    "effect_contrast", "segments_by",
    "EffectEstimate", "effect_sweep", "estimate_effect", "naive_counterfactual_oracle",
    "ConfigError", "DataError", "NumericError", "RankDeficient", "WeakInstrumentWarning", "XpError",
    "ColumnSpec", "EncodedTable", "Schema", "load_table", "summarize",
    "PolicyAssignment", "PolicyEvalResult", "constant_policy", "evaluate_policy", "greedy_policy",
    "individual_effects",
    "CovKind", "FitResult", "GramSystem", "RawData", "accumulate_gram", "covariance", "fit", "ols",
    "TslsFit", "dense_2sls_oracle", "fit_2sls",
]
