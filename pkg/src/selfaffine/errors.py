"""Exception hierarchy shared by all modules."""


class SelfAffineError(Exception):
    """Base class for every error raised by the package."""


class NotExpanding(SelfAffineError):
    pass


class Singular(SelfAffineError):
    pass


class HorizonExceeded(SelfAffineError):
    pass


class NotSimilarity(SelfAffineError):
    pass


class GridTooCoarse(SelfAffineError):
    pass


class BudgetExceeded(SelfAffineError):
    pass


class StateBudgetExceeded(BudgetExceeded):
    pass


class InvalidWitness(SelfAffineError):
    pass


class FitViolation(SelfAffineError):
    pass


class EmptySet(SelfAffineError):
    pass


class PointNotOnAttractor(SelfAffineError):
    pass


class UnsupportedDimension(SelfAffineError):
    pass


class ConfigError(SelfAffineError):
    pass
