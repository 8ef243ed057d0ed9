"""Exception categories shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, everything
else exits 1 with a one-line category prefix.
"""


class KcciolError(Exception):
    """Base class for errors raised by this package."""

    category = "error"


class UsageError(KcciolError):
    """Caller violated a precondition (bad shapes, unregistered parameters, ...)."""

    category = "usage"


class NumericError(KcciolError):
    """A non-finite value appeared where a finite one is required."""

    category = "numeric"


class FormatError(KcciolError):
    """A serialized artifact (checkpoint, report) is malformed."""

    category = "format"


class ConfigError(KcciolError):
    """Configuration file is invalid; carries the offending line when known."""

    category = "config"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
