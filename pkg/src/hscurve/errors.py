"""Exception types raised across the package."""


class HSCurveError(Exception):
    """Base class for all package errors."""


class ValidationError(HSCurveError, ValueError):
    """Bad input parameters or configuration (CLI exit status 2)."""


class NumericalError(HSCurveError, RuntimeError):
    """A numerical procedure failed to converge (CLI exit status 3)."""


class DegenerateCurve(ValidationError):
    pass


class FrenetDegenerate(ValidationError):
    pass


class OutOfChart(ValidationError):
    pass


class ResidualUnderflow(NumericalError):
    pass


class BadParams(ValidationError):
    pass


class UnsupportedSigma(ValidationError):
    pass


class InvalidProfile(ValidationError):
    pass


class NoConvergence(NumericalError):
    pass


class GridTooCoarse(NumericalError):
    pass


class QuadratureDivergence(NumericalError):
    pass


class CurveTooCloseToBoundary(ValidationError):
    pass


class NotConverged(NumericalError):
    pass


class SolverStall(NumericalError):
    pass


class NonCoercive(ValidationError):
    pass


class ChartMismatch(ValidationError):
    pass


class EpsTooLarge(ValidationError):
    pass


class NormalizationMismatch(ValidationError):
    pass


class RegimeMasked(NumericalError):
    pass


class Collapse(NumericalError):
    pass
