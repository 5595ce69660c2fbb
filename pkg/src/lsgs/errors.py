"""Exception hierarchy.

Each class carries a ``category`` string that the CLI prints verbatim so that
harnesses can scrape failures with a single regex.
"""


class LsgsError(Exception):
    category = "error"


class ConfigError(LsgsError, ValueError):
    category = "config-error"


class DataError(LsgsError, ValueError):
    category = "data-error"


class ShapeError(DataError):
    category = "shape-error"


class TrainingError(LsgsError, RuntimeError):
    category = "training-error"


class UndefinedMetricError(LsgsError, ValueError):
    category = "undefined-metric"
