"""Exception types shared across the package.

The CLI maps these to process exit codes: ConfigError -> 2,
DataError/FormatError -> 3, NumericError -> 4.
"""


class DriftsegError(Exception):
    pass


class ShapeError(DriftsegError, ValueError):
    """Operand shapes are inconsistent with the operation."""


class BranchError(DriftsegError, IndexError):
    """Branch index outside the configured branch count."""


class StaleContextError(DriftsegError, RuntimeError):
    """A backward pass was handed a context from a different forward."""


class ConfigError(DriftsegError, ValueError):
    """Invalid configuration value or combination."""


class DataError(DriftsegError, ValueError):
    """Labels, domains, or dataset contents out of contract."""


class FormatError(DriftsegError, ValueError):
    """Corrupt or incompatible serialized file."""


class UndefinedMetricError(DriftsegError, ValueError):
    """Metric undefined for the given inputs (zero variance, empty union)."""


class NumericError(DriftsegError, ArithmeticError):
    """Non-finite value produced where the pipeline requires finite math."""
