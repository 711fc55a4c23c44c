"""Exception types shared across the package."""


class LatGraphError(Exception):
    """Base class for all package errors."""


class ConfigError(LatGraphError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(LatGraphError, ValueError):
    """Array shapes or bin layouts do not line up."""


class InsufficientDataError(LatGraphError, ValueError):
    """Not enough samples to compute the requested quantity."""


class ValidationError(LatGraphError, ValueError):
    """An input violates a documented invariant."""


class TraceParseError(LatGraphError, ValueError):
    """A trace file row could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
