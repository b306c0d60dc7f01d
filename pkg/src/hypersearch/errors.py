"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: configuration problems exit 1, data
problems exit 2, numerical failures exit 3.
"""


class HypersearchError(Exception):
    """Base class for package errors."""


class ConfigError(HypersearchError):
    """Invalid model or run configuration."""


class DataError(HypersearchError):
    """Malformed, inconsistent, or missing input data."""


class SnapshotError(DataError):
    """Unreadable model snapshot or snapshot inconsistent with its own header."""


class NumericalError(HypersearchError):
    """Non-finite values encountered, or a numerical check failed."""
