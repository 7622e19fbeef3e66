"""Exception types raised across the package."""


class TensorVarError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(TensorVarError, ValueError):
    """A configuration or specification object violates its invariants."""


class DivergenceError(TensorVarError, RuntimeError):
    """Numerical integration produced a non-finite or runaway state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InsufficientDataError(TensorVarError, ValueError):
    """Not enough samples to build the requested object."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class NotPositiveDefiniteError(TensorVarError, ValueError):
    """A matrix expected to be symmetric positive definite failed to factor."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NonFiniteError(TensorVarError, ValueError):
    """A computed quantity contains NaN or inf."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class MemoryBudgetError(TensorVarError, ValueError):
    """A requested feature dimension exceeds the configured memory budget."""


class StaleCacheError(TensorVarError, RuntimeError):
    """Backward pass requested without a matching forward cache."""
