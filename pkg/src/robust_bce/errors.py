"""Exception hierarchy shared by every estimator component."""


class EstimationError(Exception):
    """Base class for all errors raised by :mod:`robust_bce`."""


class EmptyProblem(EstimationError, ValueError):
    pass


class DisconnectedGraph(EstimationError, ValueError):
    pass


class DimensionMismatch(EstimationError, ValueError):
    pass


class NonPositiveDefinite(EstimationError, ValueError):
    pass


class LinearAlgebraFailure(EstimationError, ArithmeticError):
    pass


class WeightCountMismatch(EstimationError, ValueError):
    pass


class NegativeInput(EstimationError, ValueError):
    pass


class TooFewPoints(EstimationError, ValueError):
    pass


class NonFiniteData(EstimationError, ValueError):
    pass


class EigenFailure(EstimationError, ArithmeticError):
    pass


class DegenerateDesign(EstimationError, ValueError):
    pass


class PairingError(EstimationError, ValueError):
    pass


class FeatureNameMismatch(EstimationError, ValueError):
    pass


class EmptyPartition(EstimationError, ValueError):
    pass


class CoverageGap(EstimationError, ValueError):
    pass


class ModeConfigMismatch(EstimationError, ValueError):
    pass


class ObservabilityError(EstimationError, ValueError):
    pass


class LengthMismatch(EstimationError, ValueError):
    pass


class EmptySeries(EstimationError, ValueError):
    pass
