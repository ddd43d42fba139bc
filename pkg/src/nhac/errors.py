class InvalidInputError(ValueError):
    """Raised when an operation receives data violating its preconditions."""


class InvalidConfigError(ValueError):
    """Raised for out-of-range or inconsistent configuration values."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss; the epoch is aborted."""
