"""Exception hierarchy shared across the package."""


class GI2IError(Exception):
    """Base class for all package errors."""


class DimensionError(GI2IError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(GI2IError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(GI2IError, ValueError):
    """Invalid configuration value or combination."""


class InputError(GI2IError, ValueError):
    """Invalid input data (labels, ids, degenerate tables)."""


class ContractError(GI2IError, RuntimeError):
    """An API precondition was violated by the caller."""
