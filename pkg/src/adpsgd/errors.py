"""Exception types raised across the package."""


class InvalidOrderError(ValueError):
    """A matrix or ring was requested with an unsupported number of learners."""


class DimensionError(ValueError):
    """Operands have mismatched orders or shapes."""


class OutOfRegimeError(ValueError):
    """A closed form was requested outside the range where it holds."""


class NumericalError(ArithmeticError):
    """Non-finite input or a failed eigendecomposition."""


class InvalidStateError(RuntimeError):
    pass


class SynchronizationError(RuntimeError):
    """Learners were expected to hold identical models but do not."""


class StalenessOverflowError(RuntimeError):
    """A gradient would need a model older than the history buffer keeps."""

    def __init__(self, message, event=None):
        super().__init__(message)
        self.event = event


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""
