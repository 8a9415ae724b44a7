"""Exception types raised across the package."""


class StarGpError(Exception):
    """Base class for all stargp errors."""


class DimensionMismatch(StarGpError):
    pass


class NonPositivePivot(StarGpError):
    pass


class NegativeSchur(StarGpError):
    pass


class DegenerateFactor(StarGpError):
    pass


class DegenerateCovariance(StarGpError):
    pass


class PointwiseDeltaUnsupported(StarGpError):
    pass


class MissingPivot(StarGpError):
    pass


class PivotNotInvertible(StarGpError):
    pass


class SingularInducingGram(StarGpError):
    pass


class PivotNotMember(StarGpError):
    pass


class UnsupportedCombination(StarGpError):
    pass


class NegativeScalar(StarGpError):
    pass


class NonFiniteElbo(StarGpError):
    pass


class ShapeMismatch(StarGpError):
    pass


class SchemaError(StarGpError):
    pass


class NonMonotoneTime(StarGpError):
    pass


class EmptyAfterFilter(StarGpError):
    pass


class ConfigError(StarGpError):
    pass
