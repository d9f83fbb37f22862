"""Exception hierarchy."""


class CarinfError(Exception):
    """Base class for all errors raised by carinf."""


class InvalidSample(CarinfError, ValueError):
    pass


class DuplicateUnit(CarinfError, ValueError):
    pass


class WrongTreatedCount(CarinfError, ValueError):
    pass


class EmptySet(CarinfError, ValueError):
    pass


class RankDeficient(CarinfError, ValueError):
    pass


class ScoreOutOfRange(CarinfError, ValueError):
    pass


class DesignMismatch(CarinfError, ValueError):
    pass


class Infeasible(CarinfError):
    """No complete finite-cost matching exists."""


class MissingOutcome(CarinfError, ValueError):
    pass


class MissingProbs(CarinfError, ValueError):
    pass


class SupportTooLarge(CarinfError):
    pass


class DegenerateVariance(CarinfError, ValueError):
    pass


class NoRejectionAtOne(CarinfError):
    """The worst-case p-value already exceeds alpha at Gamma = 1."""
