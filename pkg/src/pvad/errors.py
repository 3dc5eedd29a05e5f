"""Exception hierarchy shared by every pvad module."""

from __future__ import annotations


class PVADError(Exception):
    """Base class for all errors raised by pvad."""


class ConfigurationError(PVADError, ValueError):
    """Invalid configuration (sample rate, variant name, dimensions, ...)."""


class InputError(PVADError, ValueError):
    """Malformed or non-finite input data."""


class ContractError(PVADError, ValueError):
    """A caller violated an operation's precondition (shape/length mismatch)."""


class NumericError(PVADError, ArithmeticError):
    """A computation produced a non-finite intermediate."""


class TrainingError(PVADError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class LoadError(PVADError, ValueError):
    """A model container or corpus could not be parsed.

    ``field`` names the header field or tensor that failed validation.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
