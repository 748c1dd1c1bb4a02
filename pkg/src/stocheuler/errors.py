"""Exception types shared across the package."""


class StochEulerError(Exception):
    """Base class for all package errors."""


class DomainError(StochEulerError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(DomainError):
    """An experiment configuration is missing keys or malformed."""


class ResourceLimitError(StochEulerError):
    """A request would exceed a configured resource bound (memory, level cap)."""


class CapabilityError(StochEulerError):
    """An operation needs an optional capability (e.g. a Jacobian) that is absent."""


class AccuracyError(StochEulerError):
    """A solver or quadrature could not reach the requested tolerance."""


class DivergenceError(StochEulerError):
    """A trajectory produced a non-finite value.

    Carries the step index at which the blow-up was detected and, when
    raised from an ensemble, the replication index.
    """

    def __init__(self, message: str, *, step: int, replication: int | None = None):
        super().__init__(message)
        self.step = step
        self.replication = replication
