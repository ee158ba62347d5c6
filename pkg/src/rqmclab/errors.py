"""Exception hierarchy shared by the library and the CLI.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`NumericError`
to exit code 3.
"""

from __future__ import annotations


class RqmcError(Exception):
    """Base class for all package errors."""


class ConfigError(RqmcError, ValueError):
    """Invalid input files, parameters or study configuration."""


class DirectionFileError(ConfigError):
    """Malformed direction-number file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CapacityError(ConfigError):
    """A table or generator cannot serve the requested dimension or size."""


class NumericError(RqmcError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ExtensionTooSmall(NumericError):
    """Periodic extension of a covariance kernel has materially negative coefficients."""


class SolverError(NumericError):
    """Conjugate gradient did not reach the requested tolerance."""

    def __init__(self, message: str, residual: float | None = None, context: str | None = None):
        self.residual = residual
        self.context = context
        if context:
            message = f"{message} [{context}]"
        super().__init__(message)
