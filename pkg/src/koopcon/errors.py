"""Exception hierarchy shared by every koopcon module.

The CLI maps these onto process exit codes, so new error types should
subclass one of the categories below rather than ``KoopconError`` directly.
"""


class KoopconError(Exception):
    """Base class for all errors raised by koopcon."""


class DimensionError(KoopconError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(KoopconError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(KoopconError, ValueError):
    """A configuration value is missing, mistyped or out of range."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(KoopconError):
    """Input data is unusable (empty classes, bad files, ...)."""


class FormatError(DataError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LengthError(FormatError):
    """A binary payload is shorter or longer than its header declares."""

    def __init__(self, message, expected, actual):
        super().__init__(f"{message}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class ChecksumError(FormatError):
    """Stored CRC does not match the payload."""


class ConsistencyError(DataError):
    """Two related inputs disagree (e.g. image count vs label count)."""


class CompatibilityError(DataError):
    """A container was written by an incompatible version or config."""


class NumericError(KoopconError, ArithmeticError):
    """A computation produced a non-finite value."""
