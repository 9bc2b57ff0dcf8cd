"""Exception types raised by the library."""


class MjlsError(Exception):
    """Base class for all library errors."""


class DimensionError(MjlsError, ValueError):
    """Tuple or matrix shapes do not agree."""


class StabilityError(MjlsError):
    """The policy is not mean-square stabilizing."""

    def __init__(self, message="policy is not mean-square stabilizing", rho=None):
        super().__init__(message)
        self.rho = rho


class SingularSystem(MjlsError):
    """A linear solve failed or its residual could not be certified."""


class NotConvergedError(MjlsError):
    """An iterative scheme exhausted its iteration budget."""


class StepRejected(MjlsError):
    """An admissible step left the stabilizing set or increased the cost."""


class DomainError(MjlsError, ValueError):
    """An argument lies outside the domain where a formula is valid."""


class GenerationFailed(MjlsError):
    """Random instance generation could not meet its target."""
