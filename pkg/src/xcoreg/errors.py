class XCoRegError(Exception):
    """Base class for every error raised by the registration engine."""


class VolumeFormatError(XCoRegError):
    pass


class MalformedHeaderError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    pass


class InvalidSpacingError(VolumeFormatError):
    pass


class NonFiniteDataError(VolumeFormatError):
    pass


class TransformError(XCoRegError):
    pass


class HeterogeneousGroupError(TransformError):
    pass


class DensityError(XCoRegError):
    pass


class EmptySampleError(DensityError):
    pass


class DegenerateBinningError(DensityError):
    pass


class MetricError(XCoRegError):
    pass


class ZeroVarianceError(MetricError):
    pass


class InsufficientImagesError(MetricError):
    pass


class RegistrationError(XCoRegError):
    pass


class EmptyOverlapError(RegistrationError):
    pass


class MixedDimensionalityError(RegistrationError):
    pass


class NonFiniteGradientError(RegistrationError):
    pass


class NonFiniteLossError(RegistrationError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class EvaluationError(XCoRegError):
    pass


class EmptyForegroundError(EvaluationError):
    pass
