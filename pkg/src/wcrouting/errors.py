"""Exception hierarchy.

Exceptions are grouped by the CLI exit code they map to: validation
problems (2), numerical failures (3) and size caps (4).
"""


class RoutingGameError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RoutingGameError, ValueError):
    pass


class MalformedDocument(ValidationError):
    pass


class NonpositiveDemand(ValidationError):
    pass


class NonpositiveCapacity(ValidationError):
    pass


class CapacityInfeasible(ValidationError):
    """Total demand is not strictly below total capacity."""


class Infeasible(ValidationError):
    """A solver was asked to route at least the total capacity."""


class TableIncomplete(ValidationError, KeyError):
    """A coalition value was requested for a demand sum the table lacks."""

    def __str__(self):
        return Exception.__str__(self)


class IndexMismatch(ValidationError):
    pass


class DimensionUnsupported(ValidationError):
    pass


class InfeasibleMove(ValidationError):
    pass


class NumericalFailure(RoutingGameError, ArithmeticError):
    pass


class NoConvergence(NumericalFailure):
    pass


class LpFailure(NumericalFailure):
    pass


class NumericalBreakdown(NumericalFailure):
    pass


class CapExceeded(RoutingGameError):
    """Instance size is above the cap of an exponential-time routine."""


class AllocationMismatch(ValidationError):
    """A cost vector does not sum to the optimal system cost."""
