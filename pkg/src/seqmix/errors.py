"""Exception types raised across the package."""


class SeqmixError(Exception):
    """Base class for all package errors."""


class DimensionError(SeqmixError, ValueError):
    """Shapes or axes do not line up."""


class DomainError(SeqmixError, ValueError):
    """An input lies outside the domain of a function."""


class NonFiniteError(SeqmixError, FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class ConfigurationError(SeqmixError, ValueError):
    """A variant config, weight set or run config is inconsistent."""


class OracleError(SeqmixError, RuntimeError):
    """The finite-difference oracle cannot be trusted for this forward."""


class PreconditionError(SeqmixError, RuntimeError):
    """An operation was called on state that cannot serve it."""


class DivergenceError(SeqmixError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
