"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class StgcnError(Exception):
    exit_code = 1


class ConfigError(StgcnError, ValueError):
    """Invalid configuration or parameters (window too short, bad ratios, ...)."""

    exit_code = 2


class ParameterError(ConfigError):
    pass


class DimensionError(StgcnError, ValueError):
    """Shape mismatch between operands."""

    exit_code = 3


class DataError(StgcnError):
    exit_code = 3


class IngestError(DataError):
    """Raised while reading a CSV; message carries row/column when known."""


class NumericError(StgcnError, ArithmeticError):
    """Non-finite values appeared (divergence, overflow)."""

    exit_code = 4


class StateError(StgcnError, RuntimeError):
    pass
