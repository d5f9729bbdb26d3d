"""Exception hierarchy shared by every module."""


class SlowFastError(Exception):
    """Base class for all errors raised by this package."""


class ModelError(SlowFastError):
    pass


class NonFiniteCoefficient(ModelError):
    pass


class DegenerateModel(ModelError):
    pass


class NotCLTCompatible(ModelError):
    pass


class MeasureError(SlowFastError):
    pass


class DimensionMismatch(MeasureError):
    pass


class SizeCapExceeded(MeasureError):
    pass


class IndexOutOfRange(MeasureError):
    pass


class SimulationError(SlowFastError):
    pass


class StepSizeTooLarge(SimulationError):
    pass


class NonFiniteState(SimulationError):
    """Raised on blow-up; carries the first offending particle and time."""

    def __init__(self, message, particle=None, time=None):
        super().__init__(message)
        self.particle = particle
        self.time = time


class GridMismatch(SimulationError):
    pass


class Unconverged(SlowFastError):
    pass


class DegenerateFit(SlowFastError):
    pass


class TailNotConverged(SlowFastError):
    pass


class StepTooSmall(SlowFastError):
    pass


class NonPSDSigma(SlowFastError):
    pass


class NotSymmetric(SlowFastError):
    pass


class NegativeBeyondTolerance(SlowFastError):
    pass


class InsufficientReplicas(SlowFastError):
    pass


class NonPositiveValue(SlowFastError):
    pass


class ConfigInvalid(SlowFastError):
    """Configuration problem; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
