"""Exception types shared across the package."""


class TwindiffError(Exception):
    """Base class for all package errors."""


class ConfigError(TwindiffError):
    """Invalid configuration value or precondition violation."""


class ShapeError(TwindiffError):
    """Array dimensions do not match what an operation expects."""


class DataError(TwindiffError):
    """Malformed input table, schema, or out-of-vocabulary value."""


class GraphError(TwindiffError):
    """Misuse of the recorded computation graph (e.g. double backward)."""


class NumericsError(TwindiffError):
    """Non-finite value where a finite one is required."""


class CheckpointError(TwindiffError):
    """Unreadable, version-incompatible, or inconsistent checkpoint file."""
