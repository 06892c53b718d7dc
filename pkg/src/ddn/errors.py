"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI uses when it escapes.
"""


class DDNError(Exception):
    exit_code = 1


class ConfigError(DDNError, ValueError):
    """Invalid configuration: bad shapes, out-of-range hyperparameters."""

    exit_code = 2


class DataError(DDNError, ValueError):
    """Input data violates a precondition (bad ids, zero impressions...)."""

    exit_code = 3


class UsageError(DDNError, RuntimeError):
    """API called in the wrong order or with an empty argument."""

    exit_code = 4


class NumericalError(DDNError, FloatingPointError):
    """NaN/Inf detected during training."""

    exit_code = 5
