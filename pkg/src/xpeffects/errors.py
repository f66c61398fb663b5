"""Exception hierarchy.

Every error carries an exit code used by the command line front end:
1 for configuration problems, 2 for data problems and 3 for numerical
failures.
"""
from __future__ import annotations

from typing import Any


class XpError(Exception):
    exit_code = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict:
        return {
            "code": self.exit_code,
            "error": type(self).__name__,
            "message": self.message,
            "context": self.context,
        }


class ConfigError(XpError):
    exit_code = 1


class DataError(XpError):
    exit_code = 2


class NumericError(XpError):
    exit_code = 3


# configuration / usage
class InvalidConfig(ConfigError):
    pass


class SchemaError(ConfigError):
    pass


class UnknownColumn(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"unknown column {name!r}", column=name)


class TreatmentNotCategorical(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"treatment column {name!r} is not categorical", column=name)


class CovKindUnavailable(ConfigError):
    def __init__(self, kind: str):
        super().__init__(f"covariance {kind!r} was not computed for this fit", cov_kind=kind)


class ReferenceLevelRequested(ConfigError):
    def __init__(self, level: str):
        super().__init__(
            f"treatment level {level!r} is the reference (control) level", level=level
        )


class SegmentNotInModel(ConfigError):
    def __init__(self, column: str):
        super().__init__(
            f"segment column {column!r} is not a model covariate", column=column
        )


# data
class MissingColumn(DataError):
    def __init__(self, name: str):
        super().__init__(f"column {name!r} not found in header", column=name)


class InputUnreadable(DataError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"cannot read {path!r}: {reason}", path=path)


class UnparseableValue(DataError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(
            f"cannot parse {value!r} in column {column!r} at row {row}",
            row=row, column=column, value=value,
        )


class MissingValue(DataError):
    def __init__(self, row: int, column: str):
        super().__init__(
            f"missing value in column {column!r} at row {row}", row=row, column=column
        )


class FewerThanTwoTreatmentLevels(DataError):
    def __init__(self, name: str, n_levels: int):
        super().__init__(
            f"treatment column {name!r} has {n_levels} level(s), need at least 2",
            column=name, n_levels=n_levels,
        )


class EmptySegment(DataError):
    def __init__(self, segment: str):
        super().__init__(f"segment {segment!r} selects no rows", segment=segment)


class DimensionMismatch(DataError):
    pass


class MissingClusterIds(DataError):
    def __init__(self):
        super().__init__("clustered covariance requested but data has no cluster ids")


class TooLargeForOracle(DataError):
    def __init__(self, n: int, limit: int):
        super().__init__(
            f"{n} rows exceeds the dense oracle guard of {limit}", n=n, limit=limit
        )


class DegenerateSubset(DataError):
    """Raised by a statistic when a bootstrap subset lacks required variation."""


# numerical
class RankDeficient(NumericError):
    def __init__(self, columns: list[int], names: list[str] | None = None):
        names = names or [str(c) for c in columns]
        super().__init__(
            "design is rank deficient in columns: " + ", ".join(names),
            columns=list(columns), terms=list(names),
        )
        self.columns = list(columns)
        self.names = list(names)


class StatisticFailed(NumericError):
    pass


class WeakInstrumentWarning(UserWarning):
    pass
