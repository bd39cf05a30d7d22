"""Exception types shared across the package."""


class PipebridgeError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(PipebridgeError):
    """Operands have incompatible dimensions."""


class SupportViolation(PipebridgeError):
    """A mass entry is positive where the reference measure is zero."""


class DivideByZero(PipebridgeError):
    """Element-wise division hit a zero divisor on the dividend's support."""


class LogOfNonPositive(PipebridgeError):
    """Element-wise logarithm of a non-positive stored entry."""


class InvalidVolume(PipebridgeError):
    """A pipe or tank volume is not strictly positive."""


class HypothesisViolated(PipebridgeError):
    """The line-transition equations are not solvable for the given speeds.

    Raised when the water would leave the line within one step (the cumulative
    traversal time past the first pipe does not exceed one) or when a stagnant
    pipe blocks the traversal mid-line.
    """


class TopologyError(PipebridgeError):
    """A downstream traversal revisited a state without reaching an exit."""


class FlowBalanceError(PipebridgeError):
    """Inflow and outflow rates disagree at a junction."""


class Infeasible(PipebridgeError):
    """The observations cannot be met on the prior's support."""


class DegenerateUpdate(PipebridgeError):
    """A scaling update demands mass at a sensor the prior cannot reach."""

    def __init__(self, t, sensors, message=None):
        self.t = t
        self.sensors = tuple(sensors)
        super().__init__(
            message
            or f"prior cannot route mass to sensor(s) {self.sensors} at time {t}"
        )


class MaxItersExceeded(PipebridgeError):
    """Iteration budget exhausted before reaching tolerance."""

    def __init__(self, message, trace=None):
        self.trace = trace if trace is not None else []
        super().__init__(message)


class NotConverged(PipebridgeError):
    """A result was requested from a state that has not converged."""


class NotInKernel(PipebridgeError):
    """A shift direction is not in the unobservable subspace."""


class NegativeMass(PipebridgeError):
    """A shifted plan would carry negative mass."""


class InvarianceViolation(PipebridgeError):
    """The downstream-unobserved set is not forward invariant (internal bug)."""


class InputError(PipebridgeError):
    """A file failed parsing or schema validation."""


class NotCanonicalizableWarning(UserWarning):
    """Non-uniqueness is not confined to downstream-unobserved states."""
