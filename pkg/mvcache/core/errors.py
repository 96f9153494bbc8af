"""Errors module - exception hierarchy shared across the package.

Every error raised on purpose by mvcache derives from MVCacheError so
callers (the CLI, the frame driver's offload fallback) can catch the
whole family in one place.
"""

from typing import Optional


class MVCacheError(Exception):
    """Base exception for all mvcache errors."""
    pass


class InvalidArgumentError(MVCacheError, ValueError):
    """Raised when an argument violates an operation's precondition."""
    pass


class ConfigParseError(MVCacheError):
    """Raised when a network configuration cannot be parsed.

    Attributes:
        line_no: 1-based line number of the offending line (None when the
            error is not tied to a line)
    """

    def __init__(self, message: str, line_no: Optional[int] = None) -> None:
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class InternalError(MVCacheError, AssertionError):
    """Raised when an internal invariant is broken (grid mismatch etc.)."""
    pass


class CalibrationInfeasibleError(MVCacheError):
    """Raised when no candidate threshold satisfies the accuracy budget."""
    pass


class ProtocolError(MVCacheError):
    """Raised on malformed, truncated or corrupted wire messages."""
    pass


class UnsupportedVersionError(ProtocolError):
    """Raised when a wire message carries an unknown version."""
    pass


class HandshakeRejectedError(ProtocolError):
    """Raised when the server rejects the client's hello."""
    pass


class ProtocolDesyncError(ProtocolError):
    """Raised when the cloud replica and the server cache disagree."""
    pass


class TransportError(MVCacheError):
    """Raised when the connection to the offload server is lost."""
    pass


class UsageError(MVCacheError):
    """Raised on command-line misuse."""
    pass
