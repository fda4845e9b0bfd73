"""Exception types shared across the library."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class UnsupportedOperationError(ValueError):
    """The operation is not defined for this kernel or coefficient variant."""


class ValidationError(ValueError):
    """An object violates a structural precondition (grid, integrability, ...)."""


class AdmissibilityError(ValueError):
    """Transform parameters rejected by the admissibility validator."""


class StateSpaceError(ValueError):
    """A state left the declared state space beyond tolerance."""


class BlowUpError(RuntimeError):
    """Riccati iteration exceeded the norm cap; reports the failing node."""

    def __init__(self, message, node=None, time=None):
        super().__init__(message)
        self.node = node
        self.time = time


class NumericalViolationError(RuntimeError):
    """A quantity violated a sign/size property it should satisfy."""


class SimulationError(RuntimeError):
    """NaN or overflow during path simulation; reports path and step."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class ConsistencyError(RuntimeError):
    """Two internal computations of the same quantity disagree."""


class PricingError(RuntimeError):
    """Fourier inversion failed to converge within the truncation budget."""
