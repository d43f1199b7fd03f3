"""Exception types shared across the package.

The CLI maps these onto exit codes: everything deriving from
``ValidationError`` exits with 1, ``OSError`` exits with 2.
"""


class ValidationError(ValueError):
    """An argument or input value violates a precondition."""


class DimensionError(ValidationError):
    """Tensor shapes or axis sizes disagree."""


class ConfigurationError(ValidationError):
    """A model, checkpoint or config file does not match what is required."""


class StateError(RuntimeError):
    """An operation was called at the wrong point of the lifecycle."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
