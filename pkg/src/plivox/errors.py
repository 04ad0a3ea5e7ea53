"""Exception types shared across the package."""


class PlivoxError(Exception):
    """Base class for all package errors."""


class MalformedFrameError(PlivoxError):
    """Frame images/intrinsics are inconsistent (shape or value domain)."""


class DegenerateTrackingError(PlivoxError):
    """Too few usable observations to constrain the pose."""


class FileFormatError(PlivoxError):
    """A serialized artifact could not be parsed."""

    def __init__(self, message, kind="format"):
        super().__init__(message)
        self.kind = kind  # "version" | "dimension" | "truncated" | "format"


class ConfigError(PlivoxError):
    """Invalid configuration; message lists every offending field."""
