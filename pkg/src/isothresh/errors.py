"""Exception and warning types raised across the package."""


class IsoThreshError(ValueError):
    """Base class for validation and estimation failures."""


class EmptySample(IsoThreshError):
    pass


class TooFewPoints(IsoThreshError):
    pass


class BandwidthExhausted(IsoThreshError):
    pass


class FlatDerivative(IsoThreshError):
    """The slope estimate is too small for a bounded Wald interval."""


class GridTooNarrow(IsoThreshError):
    pass


class QuantileOutOfRange(IsoThreshError):
    pass


class InvalidPlan(IsoThreshError):
    pass


class IntervalTooNarrow(IsoThreshError):
    pass


class MissingNuisance(IsoThreshError):
    pass


class InvalidSlack(IsoThreshError):
    pass


class NonIncreasingFit(IsoThreshError):
    pass


class BudgetExceedsPopulation(IsoThreshError):
    pass


class OneSidedNull(UserWarning):
    """No data on one side of the hypothesised threshold."""


class PilotDegenerate(UserWarning):
    """Pilot third-derivative estimate is numerically zero."""
