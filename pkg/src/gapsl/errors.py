"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration/data problems
exit 2, protocol violations exit 3, numeric failures exit 4.
"""


class GapslError(Exception):
    """Base class for all package errors."""


class ConfigError(GapslError):
    """Invalid configuration: bad shapes, out-of-range values, unknown keys."""


class DataError(GapslError):
    """Invalid data: labels out of range, too few samples, empty sets."""


class FormatError(DataError):
    """Malformed input file. Carries the byte offset of the violation."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(GapslError):
    """Sequencing or wire-format violation. Carries a byte offset when framed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(GapslError):
    """Non-finite values where finite ones are required."""


class DegenerateGradientError(GapslError):
    """A gradient vector has (near-)zero norm; angles against it are undefined."""


class CoordinationSkipped(GapslError):
    """Too few usable gradients this round; the caller falls back to plain PSL."""
