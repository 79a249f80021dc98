"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and file
format problems exit 2, numerical failures exit 3.
"""
from __future__ import annotations


class DeltaStyleError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(DeltaStyleError):
    """A file does not conform to one of the binary formats.

    ``offset`` is the byte position at which the problem was detected,
    when that is meaningful.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File carries an unsupported format version."""


class TruncatedError(FormatError):
    """File ends before the declared payload does."""

    def __init__(self, expected: int, actual: int, offset: int | None = None,
                 what: str = "payload"):
        super().__init__(
            f"truncated {what}: expected {expected} bytes, got {actual}",
            offset,
        )
        self.expected = expected
        self.actual = actual


class DigestError(FormatError):
    """Stored content digest does not match the payload."""


class ValidationError(DeltaStyleError):
    """An object violates its invariants and was refused."""


class ConfigError(DeltaStyleError):
    """A configuration value is out of range or inconsistent."""


class DimensionError(DeltaStyleError):
    """Array shapes do not line up."""


class ZeroNormError(DeltaStyleError):
    """An operation needing a direction received a zero vector."""


class DegenerateBatchError(DeltaStyleError):
    """Every pair in a training batch was degenerate."""


class NumericalError(DeltaStyleError):
    """A non-finite value appeared where finite numbers are required."""


class UnknownAttributeError(DeltaStyleError):
    """An attribute or prompt is not present in the active text table."""
