"""Exception hierarchy shared across the package."""


class NcsimError(Exception):
    """Base class for all package errors."""


class ConfigError(NcsimError):
    """Invalid configuration, parameters, or preconditions."""


class NumericalError(NcsimError):
    """A numerical routine failed (factorization, divergence, ...)."""


class FactorizationError(NumericalError):
    """Cholesky/eigen factorization failed even after the jitter ladder."""


class DivergenceError(NumericalError):
    """An iterative computation produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractViolationError(NcsimError):
    """A callable broke an interface contract (e.g. nonzero score at an observed index)."""


class FormatError(NcsimError):
    """A serialized artifact is corrupt or has an unsupported version."""
