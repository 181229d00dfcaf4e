"""Exception hierarchy shared across the package."""


class StreamDPError(Exception):
    """Base class for all package errors."""


class DomainError(StreamDPError, ValueError):
    """Argument outside the domain of an operation."""


class ShapeError(StreamDPError, ValueError):
    """Array shapes do not agree."""


class NotPositiveDefinite(StreamDPError, ArithmeticError):
    """Cholesky factorization hit a non-positive pivot.

    ``pivot`` is the zero-based index of the failing diagonal entry.
    """

    def __init__(self, pivot, message=None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not positive definite (pivot {self.pivot})")


class NumericError(StreamDPError, ArithmeticError):
    """Non-finite value produced during a computation."""

    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(message)


class StateError(StreamDPError, RuntimeError):
    """Operation invalid for the current ledger or scope state."""


class ConfigError(StreamDPError, ValueError):
    """Invalid run configuration or protocol/dataset mismatch."""


class DataFormatError(StreamDPError, ValueError):
    """Malformed input data file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointVersionError(StreamDPError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")


class CheckpointIntegrityError(StreamDPError):
    """Checkpoint file is truncated or fails its checksum."""
