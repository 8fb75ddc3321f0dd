"""Exception types shared across the package."""


class PolarisError(Exception):
    """Base class for all package errors."""


class ConfigError(PolarisError, ValueError):
    """Invalid parameters, dimensions or configuration keys."""

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"[{key}] {message}"
        super().__init__(message)


class DegenerateTimestepError(PolarisError, ValueError):
    """A timestep whose alpha_bar makes a formula divide by zero."""


class IllPosedStateError(PolarisError, ArithmeticError):
    """The exact scale update was asked to divide by a vanishing guidance direction."""


class ScheduleLengthError(PolarisError, IndexError):
    """A replayed scale list ran out of entries."""


class PreconditionError(PolarisError, ValueError):
    """An experiment was configured outside the regime where its claim applies."""
