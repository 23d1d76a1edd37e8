"""Exact linear and binary mixed-integer programming.

Every optimization in the package runs through :func:`solve_lp` or
:func:`solve_milp`. The LP engine is a two-phase primal revised simplex over
bounded variables: variables with finite caps stay nonbasic at either bound,
so caps never become rows. The basis inverse is kept in product form on top of
a sparse LU factorization (``scipy.sparse.linalg.splu``) that is rebuilt every
``REFACTOR_INTERVAL`` pivots. Pricing is Dantzig's rule with a Harris ratio
test, falling back to Bland's rule after ``DEGENERACY_STALL_THRESHOLD``
consecutive degenerate pivots.

A basis whose factorization is singular, or whose updated values drift from
a fresh factorization, sends the simplex back to its last factorized basis.
From there it refactors after every pivot and skips entering columns that
would make the basis singular. A phase one that ends infeasible is repeated
in that mode from the starting basis before infeasibility is reported.

Binary programs are solved by best-bound branch-and-bound over LP relaxations.
"""

import heapq
import itertools
import logging
from collections.abc import Iterable
from collections.abc import Iterator
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from community_storage.app_settings import DEGENERACY_STALL_THRESHOLD
from community_storage.app_settings import FEASIBILITY_TOLERANCE
from community_storage.app_settings import INTEGRALITY_TOLERANCE
from community_storage.app_settings import MAX_BRANCH_NODES
from community_storage.app_settings import MAX_SIMPLEX_ITERATIONS
from community_storage.app_settings import OPTIMALITY_TOLERANCE
from community_storage.app_settings import REFACTOR_INTERVAL
from community_storage.choices import Relation
from community_storage.choices import SolveStatus
from community_storage.exceptions import ProblemValidationError
from community_storage.exceptions import SolverResourceError


logger = logging.getLogger("community_storage")

PIVOT_TOLERANCE = 1e-7  # relative to the largest entry of the pivot column
BLAND_PIVOT_SHARE = 1e-2
SINGULAR_TOLERANCE = 1e-11
DRIFT_TOLERANCE = 1e-6
DEGENERATE_STEP = 1e-12


def _as_relation(value) -> Relation:
    try:
        return Relation(value)
    except ValueError as err:
        raise ProblemValidationError(f"Unknown row relation {value!r}") from err


def _frozen(values, size: int, label: str) -> np.ndarray:
    array = np.array(values, dtype=float).ravel()
    if array.size != size:
        raise ProblemValidationError(f"{label} has {array.size} entries, expected {size}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """A minimization ``min c·x`` subject to linear rows and variable bounds.

    Rows are stored as a CSR matrix with one relation and right-hand side per
    row. Bounds may be infinite; a variable with both bounds infinite is free.
    Instances are immutable; :meth:`with_bounds` derives a copy with new bounds.
    """

    objective: np.ndarray
    matrix: sparse.csr_matrix
    relations: tuple[Relation, ...]
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        objective = np.array(self.objective, dtype=float).ravel()
        n = objective.size
        matrix = sparse.csr_matrix(self.matrix, dtype=float)
        if matrix.shape[1] != n:
            raise ProblemValidationError(f"Row matrix has {matrix.shape[1]} columns for {n} variables")
        m = matrix.shape[0]
        relations = tuple(_as_relation(relation) for relation in self.relations)
        if len(relations) != m:
            raise ProblemValidationError(f"{len(relations)} relations given for {m} rows")
        objective.setflags(write=False)
        object.__setattr__(self, "objective", objective)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "relations", relations)
        object.__setattr__(self, "rhs", _frozen(self.rhs, m, "rhs"))
        object.__setattr__(self, "lower", _frozen(self.lower, n, "lower"))
        object.__setattr__(self, "upper", _frozen(self.upper, n, "upper"))
        if self.names is not None:
            names = tuple(str(name) for name in self.names)
            if len(names) != n:
                raise ProblemValidationError(f"{len(names)} names given for {n} variables")
            object.__setattr__(self, "names", names)
        self._validate()

    def _validate(self):
        if not np.all(np.isfinite(self.objective)):
            raise ProblemValidationError("Objective coefficients must be finite")
        if not np.all(np.isfinite(self.matrix.data)):
            raise ProblemValidationError("Row coefficients must be finite")
        if not np.all(np.isfinite(self.rhs)):
            raise ProblemValidationError("Right-hand sides must be finite")
        if np.isnan(self.lower).any() or np.isnan(self.upper).any():
            raise ProblemValidationError("Variable bounds must not be NaN")
        if np.isposinf(self.lower).any() or np.isneginf(self.upper).any():
            raise ProblemValidationError("A lower bound of +inf or an upper bound of -inf is empty")
        crossed = np.flatnonzero(self.lower > self.upper)
        if crossed.size:
            raise ProblemValidationError(f"Variable {int(crossed[0])} has lower bound above its upper bound")

    @classmethod
    def from_rows(cls, objective, rows: Iterable = (), lower=None, upper=None, names=None) -> "LinearProgram":
        """Build a program from ``(coefficients, relation, rhs)`` rows.

        ``coefficients`` is either a mapping from variable index to value or a
        dense sequence. Lower bounds default to 0 and upper bounds to +inf.
        """
        objective = np.array(objective, dtype=float).ravel()
        n = objective.size
        data, indices, indptr = [], [], [0]
        relations, rhs = [], []
        for coefficients, relation, value in rows:
            items = coefficients.items() if isinstance(coefficients, Mapping) else enumerate(coefficients)
            for index, coefficient in items:
                index = int(index)
                if not 0 <= index < n:
                    raise ProblemValidationError(f"Row {len(relations)} references variable {index} of {n}")
                if coefficient != 0:
                    indices.append(index)
                    data.append(float(coefficient))
            indptr.append(len(indices))
            relations.append(relation)
            rhs.append(float(value))
        matrix = sparse.csr_matrix((data, indices, indptr), shape=(len(relations), n))
        matrix.sum_duplicates()
        return cls(
            objective=objective,
            matrix=matrix,
            relations=tuple(relations),
            rhs=np.array(rhs, dtype=float),
            lower=np.zeros(n) if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), n),
            upper=np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, dtype=float), n),
            names=names,
        )

    @property
    def num_variables(self) -> int:
        return self.objective.size

    @property
    def num_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def rows(self) -> Iterator[tuple[dict[int, float], Relation, float]]:
        """Yield each row as ``(coefficients, relation, rhs)`` with a sparse coefficient dict."""
        indptr, indices, data = self.matrix.indptr, self.matrix.indices, self.matrix.data
        for row, relation in enumerate(self.relations):
            start, end = indptr[row], indptr[row + 1]
            coefficients = {int(j): float(a) for j, a in zip(indices[start:end], data[start:end], strict=True)}
            yield coefficients, relation, float(self.rhs[row])

    def with_bounds(self, lower=None, upper=None) -> "LinearProgram":
        """Return a copy sharing the rows but with replaced variable bounds."""
        return LinearProgram(
            objective=self.objective,
            matrix=self.matrix,
            relations=self.relations,
            rhs=self.rhs,
            lower=self.lower if lower is None else lower,
            upper=self.upper if upper is None else upper,
            names=self.names,
        )

    def with_objective(self, objective) -> "LinearProgram":
        """Return a copy sharing the rows and bounds but minimizing ``objective``."""
        return LinearProgram(objective, self.matrix, self.relations, self.rhs, self.lower, self.upper, self.names)

    def variable_name(self, index: int) -> str:
        return self.names[index] if self.names else f"x{index}"


class LinearProgramBuilder:
    """Accumulate variables and rows, then freeze them into a :class:`LinearProgram`.

    Rows can be added one at a time with :meth:`add_row` or as a block of rows
    sharing a relation with :meth:`add_rows`, where ``indices`` has one row per
    constraint.
    """

    def __init__(self):
        self._costs: list[np.ndarray] = []
        self._lower: list[np.ndarray] = []
        self._upper: list[np.ndarray] = []
        self._names: list[str] = []
        self._row_blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._relations: list[Relation] = []
        self._rhs: list[np.ndarray] = []
        self._variable_count = 0
        self._row_count = 0
        self._extra_costs: list[tuple[np.ndarray, np.ndarray]] = []
        self._bound_overrides: list[tuple[np.ndarray, np.ndarray | None, np.ndarray | None]] = []

    @property
    def variable_count(self) -> int:
        return self._variable_count

    @property
    def row_count(self) -> int:
        return self._row_count

    def add_variables(self, count: int, names=None, lower=0.0, upper=np.inf, cost=0.0) -> np.ndarray:
        """Append ``count`` variables and return their indices."""
        indices = np.arange(self._variable_count, self._variable_count + count)
        self._costs.append(np.broadcast_to(np.asarray(cost, dtype=float), count).copy())
        self._lower.append(np.broadcast_to(np.asarray(lower, dtype=float), count).copy())
        self._upper.append(np.broadcast_to(np.asarray(upper, dtype=float), count).copy())
        if names is None:
            names = [f"x{index}" for index in indices]
        names = list(names)
        if len(names) != count:
            raise ProblemValidationError(f"{len(names)} names given for {count} variables")
        self._names.extend(names)
        self._variable_count += count
        return indices

    def add_variable(self, name: str = "", lower: float = 0.0, upper: float = np.inf, cost: float = 0.0) -> int:
        """Append one variable and return its index."""
        names = [name or f"x{self._variable_count}"]
        return int(self.add_variables(1, names=names, lower=lower, upper=upper, cost=cost)[0])

    def set_bounds(self, indices, lower=None, upper=None):
        """Override the bounds of existing variables; the last override wins."""
        indices = np.asarray(indices, dtype=np.int64)
        lower = None if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), indices.shape).ravel()
        upper = None if upper is None else np.broadcast_to(np.asarray(upper, dtype=float), indices.shape).ravel()
        self._bound_overrides.append((indices.ravel(), lower, upper))

    def add_cost(self, indices, costs):
        """Add ``costs`` to the objective coefficients of ``indices``."""
        indices = np.asarray(indices, dtype=np.int64)
        costs = np.broadcast_to(np.asarray(costs, dtype=float), indices.shape)
        self._extra_costs.append((indices.ravel(), costs.ravel().copy()))

    def add_row(self, coefficients: Mapping[int, float], relation, rhs: float) -> int:
        """Append one row and return its index."""
        indices = np.fromiter(coefficients.keys(), dtype=np.int64, count=len(coefficients))
        values = np.fromiter(coefficients.values(), dtype=float, count=len(coefficients))
        return int(self.add_rows(indices[None, :], values[None, :], relation, [rhs])[0])

    def add_rows(self, indices, values, relation, rhs) -> np.ndarray:
        """Append a block of rows with a common relation.

        Args:
            indices: Integer array of shape ``(rows, k)``; row ``r`` touches variables ``indices[r]``.
            values: Coefficients broadcastable to the shape of ``indices``.
            relation: Relation shared by every row of the block.
            rhs: Right-hand sides, a scalar or one per row.

        Returns:
            The indices of the new rows.
        """
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim == 1:
            indices = indices[:, None]
        count, width = indices.shape
        values = np.broadcast_to(np.asarray(values, dtype=float), indices.shape)
        rows = np.arange(self._row_count, self._row_count + count)
        self._row_blocks.append((np.repeat(rows, width), indices.ravel(), values.ravel().copy()))
        self._relations.extend([_as_relation(relation)] * count)
        self._rhs.append(np.broadcast_to(np.asarray(rhs, dtype=float), count).copy())
        self._row_count += count
        return rows

    def build(self) -> LinearProgram:
        n = self._variable_count
        objective = np.concatenate(self._costs) if self._costs else np.zeros(0)
        lower = np.concatenate(self._lower) if self._lower else np.zeros(0)
        upper = np.concatenate(self._upper) if self._upper else np.zeros(0)
        for indices, costs in self._extra_costs:
            np.add.at(objective, indices, costs)
        for indices, new_lower, new_upper in self._bound_overrides:
            if new_lower is not None:
                lower[indices] = new_lower
            if new_upper is not None:
                upper[indices] = new_upper
        if self._row_blocks:
            rows = np.concatenate([block[0] for block in self._row_blocks])
            cols = np.concatenate([block[1] for block in self._row_blocks])
            data = np.concatenate([block[2] for block in self._row_blocks])
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            data = np.zeros(0)
        if cols.size and (cols.min() < 0 or cols.max() >= n):
            raise ProblemValidationError(f"A row references a variable outside 0..{n - 1}")
        matrix = sparse.coo_matrix((data, (rows, cols)), shape=(self._row_count, n)).tocsr()
        matrix.sum_duplicates()
        rhs = np.concatenate(self._rhs) if self._rhs else np.zeros(0)
        logger.debug("Built linear program: %s", {"variables": n, "rows": self._row_count, "nonzeros": matrix.nnz})
        return LinearProgram(objective, matrix, tuple(self._relations), rhs, lower, upper, tuple(self._names))


@dataclass(frozen=True, eq=False)
class MixedIntegerProgram:
    """A linear program whose variables in ``binary_mask`` are restricted to {0, 1}."""

    base: LinearProgram
    binary_mask: frozenset[int] = frozenset()

    def __post_init__(self):
        mask = frozenset(int(index) for index in self.binary_mask)
        n = self.base.num_variables
        outside = [index for index in mask if not 0 <= index < n]
        if outside:
            raise ProblemValidationError(f"Binary index {outside[0]} outside 0..{n - 1}")
        for index in mask:
            if self.base.lower[index] < 0.0 or self.base.upper[index] > 1.0:
                raise ProblemValidationError(f"Binary variable {index} must have bounds within [0, 1]")
        object.__setattr__(self, "binary_mask", mask)


@dataclass(frozen=True, eq=False)
class LpSolution:
    """Result of an LP or MILP solve.

    ``primal`` and ``row_activities`` are empty unless the status is optimal.
    The objective is ``+inf`` for infeasible and ``-inf`` for unbounded programs.
    """

    status: SolveStatus
    objective_value: float
    primal: np.ndarray = field(default_factory=lambda: np.zeros(0))
    row_activities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    nodes: int = 0

    @property
    def is_optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    def max_violation(self, problem: LinearProgram) -> float:
        """Largest bound or row violation of ``primal``, with rows scaled to unit max-abs coefficient."""
        if not self.is_optimal:
            return np.inf
        x = self.primal
        bound_violation = max(
            float(np.max(problem.lower - x, initial=0.0)), float(np.max(x - problem.upper, initial=0.0))
        )
        if problem.num_rows == 0:
            return bound_violation
        scale = np.asarray(abs(problem.matrix).max(axis=1).todense()).ravel()
        scale[scale == 0.0] = 1.0
        gap = (problem.matrix @ x - problem.rhs) / scale
        kinds = np.array([relation.value for relation in problem.relations])
        row_violation = np.where(kinds == Relation.LE.value, np.maximum(gap, 0.0), 0.0)
        row_violation = np.where(kinds == Relation.GE.value, np.maximum(-gap, 0.0), row_violation)
        row_violation = np.where(kinds == Relation.EQ.value, np.abs(gap), row_violation)
        return max(bound_violation, float(row_violation.max(initial=0.0)))


def _infeasible(iterations: int = 0, nodes: int = 0) -> LpSolution:
    return LpSolution(SolveStatus.INFEASIBLE, np.inf, iterations=iterations, nodes=nodes)


def _unbounded(iterations: int = 0, nodes: int = 0) -> LpSolution:
    return LpSolution(SolveStatus.UNBOUNDED, -np.inf, iterations=iterations, nodes=nodes)


@dataclass
class _StandardForm:
    """``A y = b, 0 <= y <= u, b >= 0`` with an all-slack/artificial starting basis.

    Structural columns come first, then slacks, then artificials. Original
    variables are recovered as ``x = offset + transform @ y[:structural]``.
    """

    matrix: sparse.csc_matrix
    rhs: np.ndarray
    upper: np.ndarray
    costs: np.ndarray
    basis: np.ndarray
    artificials: np.ndarray
    transform: sparse.csr_matrix
    offset: np.ndarray
    structural: int

    @classmethod
    def from_problem(cls, problem: LinearProgram) -> "_StandardForm":
        lower, upper = problem.lower, problem.upper
        n, m = problem.num_variables, problem.num_rows
        has_lower, has_upper = np.isfinite(lower), np.isfinite(upper)
        flipped = ~has_lower & has_upper
        free = np.flatnonzero(~has_lower & ~has_upper)
        offset = np.where(has_lower, lower, np.where(flipped, upper, 0.0))
        structural = n + free.size

        # free variables split into a positive and a negative part
        transform = sparse.csr_matrix(
            (
                np.concatenate([np.where(flipped, -1.0, 1.0), -np.ones(free.size)]),
                (np.concatenate([np.arange(n), free]), np.arange(structural)),
            ),
            shape=(n, structural),
        )
        structural_upper = np.concatenate(
            [np.where(has_lower & has_upper, upper - lower, np.inf), np.full(free.size, np.inf)]
        )
        costs = transform.T @ problem.objective
        offset_safe = np.where(np.isfinite(offset), offset, 0.0)
        matrix = (problem.matrix @ transform).tocsr()
        rhs = problem.rhs - problem.matrix @ offset_safe

        # equilibrate rows to unit max-abs coefficient
        row_max = np.asarray(abs(matrix).max(axis=1).todense()).ravel() if m else np.zeros(0)
        scale = np.where(row_max > 0.0, 1.0 / np.where(row_max > 0.0, row_max, 1.0), 1.0)
        direction = np.array([{"<=": 1.0, ">=": -1.0, "=": 0.0}[relation.value] for relation in problem.relations])
        scaled_rhs = rhs * scale
        sign = np.where(scaled_rhs < 0.0, -1.0, 1.0)
        row_factor = scale * sign
        matrix = sparse.diags(row_factor) @ matrix

        slack_rows = np.flatnonzero(direction != 0.0)
        slack_coefficient = direction[slack_rows] * sign[slack_rows]
        slacks = sparse.csr_matrix(
            (slack_coefficient, (slack_rows, np.arange(slack_rows.size))), shape=(m, slack_rows.size)
        )
        basis = np.full(m, -1, dtype=np.int64)
        basis[slack_rows[slack_coefficient > 0.0]] = structural + np.flatnonzero(slack_coefficient > 0.0)
        artificial_rows = np.flatnonzero(basis < 0)
        first_artificial = structural + slack_rows.size
        artificials = first_artificial + np.arange(artificial_rows.size)
        basis[artificial_rows] = artificials
        artificial_block = sparse.csr_matrix(
            (np.ones(artificial_rows.size), (artificial_rows, np.arange(artificial_rows.size))),
            shape=(m, artificial_rows.size),
        )
        full = sparse.hstack([matrix, slacks, artificial_block], format="csc")
        total = full.shape[1]
        full_upper = np.concatenate([structural_upper, np.full(total - structural, np.inf)])
        full_costs = np.concatenate([costs, np.zeros(total - structural)])
        return cls(
            matrix=full,
            rhs=np.abs(scaled_rhs),
            upper=full_upper,
            costs=full_costs,
            basis=basis,
            artificials=artificials,
            transform=transform,
            offset=offset_safe,
            structural=structural,
        )

    def recover(self, values: np.ndarray) -> np.ndarray:
        structural = np.clip(values[: self.structural], 0.0, self.upper[: self.structural])
        return self.offset + self.transform @ structural


class _RevisedSimplex:
    """Primal bounded-variable revised simplex on a :class:`_StandardForm`.

    In ``careful`` mode the basis is refactorized after every pivot, and a
    pivot whose new basis does not factorize is undone.
    """

    def __init__(self, form: _StandardForm, max_iterations: int, careful: bool = False):
        self.matrix = form.matrix
        self.rhs = form.rhs
        self.upper = form.upper.copy()
        self.m, self.n = self.matrix.shape
        self.basis = form.basis.copy()
        self.is_basic = np.zeros(self.n, dtype=bool)
        self.is_basic[self.basis] = True
        self.at_upper = np.zeros(self.n, dtype=bool)
        self.max_iterations = max_iterations
        self.iterations = 0
        self.careful = careful
        self._lu = None
        self._etas: list[tuple[int, np.ndarray]] = []
        self._checkpoint: tuple[np.ndarray, np.ndarray] | None = None
        self._rejected: set[int] = set()
        self.x_basic = np.zeros(self.m)
        self.refactor()

    def nonbasic_values(self) -> np.ndarray:
        values = np.where(self.at_upper, self.upper, 0.0)
        values[self.basis] = 0.0
        return values

    def values(self) -> np.ndarray:
        values = self.nonbasic_values()
        values[self.basis] = self.x_basic
        return values

    def _factorize(self):
        """Sparse LU factors of the current basis, or None when it is numerically singular."""
        try:
            lu = splu(self.matrix[:, self.basis].tocsc(), permc_spec="COLAMD")
        except RuntimeError:
            return None
        pivots = np.abs(lu.U.diagonal())
        if pivots.min() <= SINGULAR_TOLERANCE * max(1.0, float(pivots.max())):
            return None
        return lu

    def _install(self, lu):
        fresh = lu.solve(self.rhs - self.matrix @ self.nonbasic_values())
        if self._etas and not self.careful:
            drift = float(np.abs(fresh - self.x_basic).max())
            if drift > DRIFT_TOLERANCE * max(1.0, float(np.abs(fresh).max())):
                logger.debug(
                    "Basis updates drifted, refactoring after every pivot: %s",
                    {"iterations": self.iterations, "drift": drift},
                )
                self.careful = True
        self._lu = lu
        self._etas.clear()
        self.x_basic = fresh
        self._checkpoint = (self.basis.copy(), self.at_upper.copy())

    def _restore_checkpoint(self):
        """Go back to the last basis that factorized and refactor after every pivot from then on."""
        if self._checkpoint is None:
            raise SolverResourceError("The starting basis could not be factorized")
        logger.warning("Singular basis, restoring the last factorized one: %s", {"iterations": self.iterations})
        basis, at_upper = self._checkpoint
        self.basis, self.at_upper = basis.copy(), at_upper.copy()
        self.is_basic[:] = False
        self.is_basic[self.basis] = True
        self.careful = True
        self._etas.clear()
        lu = self._factorize()
        if lu is None:
            raise SolverResourceError(f"Basis became singular after {self.iterations} iterations")
        self._install(lu)

    def refactor(self):
        lu = self._factorize()
        if lu is None:
            self._restore_checkpoint()
        else:
            self._install(lu)

    def ftran(self, column: np.ndarray) -> np.ndarray:
        result = self._lu.solve(column)
        for row, eta in self._etas:
            pivot = result[row] / eta[row]
            if pivot != 0.0:
                result -= pivot * eta
            result[row] = pivot
        return result

    def btran(self, costs: np.ndarray) -> np.ndarray:
        result = np.array(costs, dtype=float)
        for row, eta in reversed(self._etas):
            result[row] = (result[row] - (result @ eta - result[row] * eta[row])) / eta[row]
        return self._lu.solve(result, trans="T")

    def _ratio_test(self, alpha: np.ndarray, direction: float, bland: bool):
        rates = -direction * alpha
        threshold = PIVOT_TOLERANCE * max(1.0, float(np.abs(alpha).max(initial=0.0)))
        basic_upper = self.upper[self.basis]
        candidates = np.flatnonzero((rates < -threshold) | ((rates > threshold) & np.isfinite(basic_upper)))
        if candidates.size == 0:
            return np.inf, None, False
        rate = np.abs(rates[candidates])
        room = np.where(
            rates[candidates] < 0.0, self.x_basic[candidates], basic_upper[candidates] - self.x_basic[candidates]
        )
        ratios = np.maximum(room, 0.0) / rate
        if bland:
            ties = np.flatnonzero(ratios <= ratios.min() + DEGENERATE_STEP)
            # smallest basic index among the ties with a usable pivot
            ties = ties[rate[ties] >= BLAND_PIVOT_SHARE * rate[ties].max()]
            chosen = int(ties[np.argmin(self.basis[candidates[ties]])])
        else:
            limit = (np.maximum(room + FEASIBILITY_TOLERANCE, 0.0) / rate).min()
            within = np.flatnonzero(ratios <= limit)
            chosen = int(within[np.argmax(rate[within])])
        row = int(candidates[chosen])
        return float(ratios[chosen]), row, bool(rates[row] > 0.0)

    def _pivot(self, entering: int, row: int, alpha: np.ndarray, direction: float, step: float, to_upper: bool):
        """Exchange ``entering`` with the basic variable of ``row``; False when the pivot had to be undone."""
        saved = (self.basis.copy(), self.at_upper.copy(), self.x_basic.copy()) if self.careful else None
        start = self.upper[entering] if self.at_upper[entering] else 0.0
        self.x_basic -= direction * step * alpha
        leaving = int(self.basis[row])
        self.at_upper[leaving] = to_upper
        self.at_upper[entering] = False
        self.is_basic[leaving] = False
        self.is_basic[entering] = True
        self.basis[row] = entering
        self.x_basic[row] = start + direction * step
        self._etas.append((row, alpha))
        if not self.careful and len(self._etas) < REFACTOR_INTERVAL:
            return True
        lu = self._factorize()
        if lu is not None:
            self._install(lu)
            return True
        if saved is None:
            self._restore_checkpoint()
            return True
        self.basis, self.at_upper, self.x_basic = saved
        self.is_basic[entering] = False
        self.is_basic[leaving] = True
        self._etas.pop()
        logger.debug("Pivot undone, basis would be singular: %s", {"entering": entering, "iterations": self.iterations})
        return False

    def run(self, costs: np.ndarray) -> SolveStatus:
        """Iterate to optimality or unboundedness from the current basis."""
        scale = max(1.0, float(np.abs(costs).max(initial=0.0)))
        tolerance = OPTIMALITY_TOLERANCE * scale
        bland = False
        stalled = 0
        while True:
            if self.iterations >= self.max_iterations:
                logger.error("Simplex iteration limit reached: %s", {"iterations": self.iterations})
                raise SolverResourceError(f"Simplex iteration limit of {self.max_iterations} reached")
            duals = self.btran(costs[self.basis])
            reduced = costs - self.matrix.T @ duals
            at_lower = ~self.is_basic & ~self.at_upper & (self.upper > 0.0)
            eligible = (at_lower & (reduced < -tolerance)) | (self.at_upper & (reduced > tolerance))
            candidates = np.flatnonzero(eligible)
            if self._rejected:
                allowed = candidates[~np.isin(candidates, sorted(self._rejected))]
                if candidates.size and not allowed.size:
                    logger.error("No entering column keeps the basis nonsingular: %s", {"iterations": self.iterations})
                    raise SolverResourceError(f"Basis became singular after {self.iterations} iterations")
                candidates = allowed
            if candidates.size == 0:
                if self._etas:
                    # confirm optimality on a fresh factorization
                    self.refactor()
                    continue
                return SolveStatus.OPTIMAL
            if bland:
                entering = int(candidates[0])
            else:
                entering = int(candidates[np.argmax(np.abs(reduced[candidates]))])
            direction = -1.0 if self.at_upper[entering] else 1.0
            alpha = self.ftran(self.matrix[:, entering].toarray().ravel())
            step, row, to_upper = self._ratio_test(alpha, direction, bland)
            span = self.upper[entering]
            if row is None and np.isinf(span):
                if self._etas:
                    self.refactor()
                    continue
                return SolveStatus.UNBOUNDED
            self.iterations += 1
            if row is None or span <= step:
                self.x_basic -= direction * span * alpha
                self.at_upper[entering] = not self.at_upper[entering]
                self._rejected.clear()
                stalled, bland = 0, False
                continue
            if not self._pivot(entering, row, alpha, direction, step, to_upper):
                self._rejected.add(entering)
                continue
            self._rejected.clear()
            if step <= DEGENERATE_STEP:
                stalled += 1
                if stalled >= DEGENERACY_STALL_THRESHOLD and not bland:
                    logger.debug("Switching to Bland's rule: %s", {"iterations": self.iterations, "stalled": stalled})
                    bland = True
            else:
                stalled, bland = 0, False


def _solve_without_rows(problem: LinearProgram) -> LpSolution:
    """Each variable sits at the bound its cost points to."""
    cost, lower, upper = problem.objective, problem.lower, problem.upper
    if np.any((cost > 0.0) & np.isneginf(lower)) or np.any((cost < 0.0) & np.isposinf(upper)):
        return _unbounded()
    resting = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper, 0.0))
    primal = np.where(cost > 0.0, lower, np.where(cost < 0.0, upper, resting))
    return LpSolution(SolveStatus.OPTIMAL, float(cost @ primal), primal, np.zeros(0))


def _two_phase(problem: LinearProgram, form: _StandardForm, max_iterations: int, careful: bool) -> LpSolution:
    simplex = _RevisedSimplex(form, max_iterations, careful)
    if form.artificials.size:
        phase_one = np.zeros(simplex.n)
        phase_one[form.artificials] = 1.0
        simplex.run(phase_one)
        residual = float(simplex.values()[form.artificials].max())
        if residual > FEASIBILITY_TOLERANCE:
            logger.debug("Phase one ended infeasible: %s", {"residual": residual, "careful": simplex.careful})
            return _infeasible(iterations=simplex.iterations)
        simplex.upper[form.artificials] = 0.0
        simplex.at_upper[form.artificials] = False

    status = simplex.run(form.costs)
    if status is SolveStatus.UNBOUNDED:
        return _unbounded(iterations=simplex.iterations)
    primal = form.recover(simplex.values())
    return LpSolution(
        SolveStatus.OPTIMAL,
        float(problem.objective @ primal),
        primal,
        problem.matrix @ primal,
        iterations=simplex.iterations,
    )


def solve_lp(problem: LinearProgram, *, max_iterations: int | None = None) -> LpSolution:
    """Solve a linear program to proven optimality, infeasibility or unboundedness.

    An infeasible verdict, or an optimum that misses a row by more than the
    feasibility tolerance, is re-derived from the starting basis with a fresh
    factorization after every pivot before it is returned.

    Args:
        problem: The program to minimize.
        max_iterations: Simplex iteration limit per attempt; defaults to ``MAX_SIMPLEX_ITERATIONS``.

    Returns:
        The solution. For an optimal solve, ``primal`` satisfies every bound and
        row within ``FEASIBILITY_TOLERANCE`` on equilibrated rows.

    Raises:
        SolverResourceError: The iteration limit was reached or no nonsingular basis could be kept.
    """
    max_iterations = MAX_SIMPLEX_ITERATIONS if max_iterations is None else max_iterations
    if problem.num_rows == 0:
        return _solve_without_rows(problem)
    form = _StandardForm.from_problem(problem)

    solution = _two_phase(problem, form, max_iterations, careful=False)
    if solution.status is not SolveStatus.UNBOUNDED and solution.max_violation(problem) > FEASIBILITY_TOLERANCE:
        logger.debug(
            "Re-solving with a factorization after every pivot: %s",
            {"status": solution.status.value, "iterations": solution.iterations},
        )
        retry = _two_phase(problem, form, max_iterations, careful=True)
        solution = replace(retry, iterations=solution.iterations + retry.iterations)
    logger.debug(
        "Solved linear program: %s",
        {
            "variables": problem.num_variables,
            "rows": problem.num_rows,
            "status": solution.status.value,
            "iterations": solution.iterations,
        },
    )
    return solution


@dataclass(order=True)
class _Node:
    bound: float
    depth_key: int
    sequence: int
    lower: np.ndarray = field(compare=False)
    upper: np.ndarray = field(compare=False)
    solution: LpSolution = field(compare=False)


def _gap(incumbent: float) -> float:
    return OPTIMALITY_TOLERANCE * max(1.0, abs(incumbent)) if np.isfinite(incumbent) else 0.0


def _polish(problem: MixedIntegerProgram, node: _Node, binaries: np.ndarray) -> LpSolution:
    """Re-solve a node with its binaries fixed at their rounded values."""
    rounded = np.round(node.solution.primal[binaries])
    lower, upper = node.lower.copy(), node.upper.copy()
    lower[binaries] = rounded
    upper[binaries] = rounded
    polished = solve_lp(problem.base.with_bounds(lower, upper))
    if not polished.is_optimal:
        return node.solution
    primal = polished.primal.copy()
    primal[binaries] = rounded
    return LpSolution(
        SolveStatus.OPTIMAL,
        float(problem.base.objective @ primal),
        primal,
        problem.base.matrix @ primal,
        iterations=polished.iterations,
    )


def solve_milp(problem: MixedIntegerProgram, *, node_limit: int | None = None) -> LpSolution:
    """Solve a binary mixed-integer program by best-bound branch-and-bound.

    Nodes are explored in order of their LP bound, deeper nodes first among
    equal bounds. The most fractional binary is branched on, rounding
    direction first. Without binaries this is :func:`solve_lp`.

    Raises:
        SolverResourceError: More than ``node_limit`` nodes were explored.
    """
    if not problem.binary_mask:
        return solve_lp(problem.base)
    node_limit = MAX_BRANCH_NODES if node_limit is None else node_limit
    binaries = np.array(sorted(problem.binary_mask), dtype=np.int64)
    base = problem.base
    counter = itertools.count()

    root = solve_lp(base)
    if not root.is_optimal:
        return root
    heap = [_Node(root.objective_value, 0, next(counter), base.lower.copy(), base.upper.copy(), root)]
    incumbent = None
    incumbent_value = np.inf
    nodes = 0
    while heap:
        node = heapq.heappop(heap)
        if node.bound >= incumbent_value - _gap(incumbent_value):
            break
        nodes += 1
        if nodes > node_limit:
            logger.error("Branch-and-bound node limit reached: %s", {"nodes": nodes, "incumbent": incumbent_value})
            raise SolverResourceError(f"Branch-and-bound node limit of {node_limit} reached")
        values = node.solution.primal[binaries]
        fractionality = np.abs(values - np.round(values))
        if fractionality.max() <= INTEGRALITY_TOLERANCE:
            candidate = _polish(problem, node, binaries)
            if candidate.objective_value < incumbent_value:
                incumbent, incumbent_value = candidate, candidate.objective_value
                logger.debug("New incumbent: %s", {"objective": incumbent_value, "nodes": nodes})
            continue
        branch = int(binaries[np.argmax(fractionality)])
        preferred = 1.0 if node.solution.primal[branch] >= 0.5 else 0.0
        for fixed in (preferred, 1.0 - preferred):
            lower, upper = node.lower.copy(), node.upper.copy()
            lower[branch] = upper[branch] = fixed
            child = solve_lp(base.with_bounds(lower, upper))
            if child.is_optimal and child.objective_value < incumbent_value - _gap(incumbent_value):
                heapq.heappush(
                    heap, _Node(child.objective_value, node.depth_key - 1, next(counter), lower, upper, child)
                )

    if incumbent is None:
        return _infeasible(nodes=nodes)
    logger.debug("Solved binary program: %s", {"binaries": binaries.size, "nodes": nodes})
    return LpSolution(
        SolveStatus.OPTIMAL,
        incumbent.objective_value,
        incumbent.primal,
        incumbent.row_activities,
        iterations=incumbent.iterations,
        nodes=nodes,
    )


def dump_problem(problem: LinearProgram) -> str:
    """Render a program as plain text: variable names, objective, bounds, then one dense row per line."""
    names = [problem.variable_name(index) for index in range(problem.num_variables)]
    lines = [
        "# variables: " + " ".join(names),
        "# minimize: " + " ".join(f"{value:.12g}" for value in problem.objective),
        "# bounds: "
        + " ".join(f"[{lo:.12g},{up:.12g}]" for lo, up in zip(problem.lower, problem.upper, strict=True)),
    ]
    for coefficients, relation, rhs in problem.rows:
        dense = np.zeros(problem.num_variables)
        for index, value in coefficients.items():
            dense[index] = value
        lines.append(" ".join(f"{value:.12g}" for value in dense) + f" {relation.value} {rhs:.12g}")
    return "\n".join(lines) + "\n"
