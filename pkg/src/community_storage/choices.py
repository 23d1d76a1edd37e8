"""Enumerated choices shared across the package."""

from enum import Enum


class Relation(str, Enum):
    """Relation between a constraint row's activity and its right-hand side."""

    LE = "<="  # activity at most rhs
    EQ = "="
    GE = ">="  # activity at least rhs


class SolveStatus(str, Enum):
    """Terminal state of an LP or MILP solve."""

    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class SharingMode(str, Enum):
    """How stored energy may be used by the members of a coalition."""

    PER_BUILDING = "per_building"  # each building discharges only what it charged
    POOLED = "pooled"  # stored energy is a common pool, only the total state of charge is non-negative


class AllocationMethod(str, Enum):
    """Supported cost allocation schemes."""

    NUCLEOLUS = "nucleolus"
    SHAPLEY = "shapley"
    PROPORTIONAL = "proportional"


class TraceAction(str, Enum):
    """Kinds of step recorded while computing the nucleolus."""

    MASTER = "master"  # master LP solved
    VIOLATE = "violate"  # violated coalition added to the constraint set
    BIND = "bind"  # binding block fixed, episode closed


class ComplementarityKind(str, Enum):
    """Pairs of flows that must not be simultaneously positive."""

    STORAGE = "charge_discharge"
    GRID = "buy_sell"
