"""Exceptions for the Community Storage package.

The command-line interface maps the first group (bad input) to exit status 2
and the second group (runtime failures) to exit status 1.
"""


class CommunityStorageError(Exception):
    """Base class for every error raised by the package."""


class ProblemValidationError(CommunityStorageError, ValueError):
    """Used when a linear program is malformed: mismatched dimensions, non-finite data or crossed bounds."""


class ModelValidationError(CommunityStorageError, ValueError):
    """Used when community input data violates a model invariant.

    The ``field`` attribute names the offending input, for example ``tariff.sell`` or ``profiles.demand_kw``.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CoalitionError(CommunityStorageError, ValueError):
    """Used when a coalition is empty, names unknown buildings or lies outside the community."""


class ModelMismatchError(CommunityStorageError, ValueError):
    """Used when results computed for one community are combined with another community's model."""


class SolverError(CommunityStorageError):
    """Used when a program that must have an optimal solution does not reach one."""


class SolverResourceError(SolverError):
    """Used when the simplex iteration limit or branch-and-bound node limit is hit, or no nonsingular basis is left."""


class InfeasibleCoalitionError(CommunityStorageError):
    """Used when the sizing program of a coalition has no optimal solution."""

    def __init__(self, coalition: str, status: str):
        self.coalition = coalition
        self.status = status
        super().__init__(f"Sizing program for coalition {coalition} is {status}")


class ComplementarityError(CommunityStorageError):
    """Used when removing simultaneous charge/discharge or buy/sell flows changes the optimal cost."""

    def __init__(self, violations, objective_change: float):
        self.violations = list(violations)
        self.objective_change = objective_change
        super().__init__(
            f"{len(self.violations)} complementarity violation(s); reconstruction changed the cost by "
            f"{objective_change:.3g}"
        )


class AllocationError(CommunityStorageError):
    """Used when a cost allocation cannot be computed or its internal consistency checks fail."""
