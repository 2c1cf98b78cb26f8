"""Exception taxonomy shared across the package.

Split by who is at fault: ShapeError/UsageError mean the calling code broke a
contract, ConfigError/DataError mean the user's inputs are bad (the CLI maps
these to exit codes 2 and 3), ProtocolError means an API was driven out of
order, IntegrityError means a file is corrupt, DivergenceError means training
produced non-finite numbers (exit code 4).
"""


class ShapeError(ValueError):
    """An operation received arrays whose shapes violate its contract."""


class UsageError(RuntimeError):
    """An operation was invoked in a way its contract forbids."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class DataError(ValueError):
    """A dataset record or data file violates the expected format."""


class ProtocolError(RuntimeError):
    """A stateful API (decoding, tapes) was driven out of order."""


class IntegrityError(RuntimeError):
    """A persisted file is truncated or fails its format checks."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training encountered a non-finite loss or gradient."""
