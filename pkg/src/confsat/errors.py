"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of the operands do not fit the operation."""


class ConfigurationError(ValueError):
    """A config value is invalid or inconsistent with the model."""


class UsageError(ValueError):
    """The call violates a documented precondition."""


class NumericalError(RuntimeError):
    """Training or checking hit a numerical failure (NaN, divergence)."""
