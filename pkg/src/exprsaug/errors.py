"""Exception hierarchy shared by all exprsaug modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ExprsaugError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ExprsaugError):
    """Invalid flag combination, config file, or run configuration."""


class DataError(ExprsaugError):
    """Malformed input data or a violated data contract."""


class NumericError(ExprsaugError):
    """Non-finite values or numerical divergence during computation."""
