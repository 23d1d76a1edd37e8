"""Cost allocation of the grand coalition's cost among its members.

The nucleolus is computed lexicographically: each episode minimizes the
largest excess ``x(S) - v(S)`` over the coalitions not yet fixed, fixes the
coalitions that attain it, and continues until the allocation is unique.
Constraints are generated on demand; the violated coalition with the largest
excess is found by the game's own search, so the storage game evaluates only
a small fraction of its ``2^N`` coalitions.
"""

import logging
import math
import time
from collections.abc import Iterable
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from community_storage.app_settings import BINDING_RETRIES
from community_storage.app_settings import BINDING_TOLERANCE
from community_storage.app_settings import DSAT_ENUMERATION_MAX_PLAYERS
from community_storage.app_settings import SHAPLEY_MAX_PLAYERS
from community_storage.app_settings import UNIQUENESS_TOLERANCE
from community_storage.app_settings import VIOLATION_TOLERANCE
from community_storage.choices import AllocationMethod
from community_storage.choices import Relation
from community_storage.choices import TraceAction
from community_storage.coalition_value import CharacteristicCache
from community_storage.coalition_value import building_opex
from community_storage.coalition_value import no_storage_cost
from community_storage.exceptions import AllocationError
from community_storage.games import CostGame
from community_storage.games import StorageGame
from community_storage.helpers import popcounts
from community_storage.model import CoalitionKey
from community_storage.model import CommunityModel
from community_storage.solver import LinearProgramBuilder
from community_storage.solver import solve_lp


logger = logging.getLogger("community_storage")

SATISFACTION_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class Allocation:
    """Cost share of every player, in player order."""

    x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).ravel()
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    def __len__(self) -> int:
        return self.x.size

    def __getitem__(self, index: int) -> float:
        return float(self.x[index])

    def total(self, coalition: CoalitionKey | None = None) -> float:
        """Sum of the shares of ``coalition``, or of everyone."""
        if coalition is None:
            return float(self.x.sum())
        return float(self.x[list(coalition.members())].sum())


@dataclass(frozen=True)
class BindingBlock:
    """Coalitions fixed at excess ``level`` when an episode closes."""

    coalitions: tuple[CoalitionKey, ...]
    level: float


@dataclass
class EpisodeState:
    """Progress of a nucleolus computation: generated coalitions, fixed blocks and the latest master solution."""

    episode: int = 1
    generated: list[CoalitionKey] = field(default_factory=list)
    bindings: list[BindingBlock] = field(default_factory=list)
    x: np.ndarray | None = None
    z: float | None = None

    @property
    def fixed(self) -> set[CoalitionKey]:
        return {coalition for block in self.bindings for coalition in block.coalitions}

    def free(self) -> list[CoalitionKey]:
        fixed = self.fixed
        return [coalition for coalition in self.generated if coalition not in fixed]


@dataclass(frozen=True)
class TraceRecord:
    """One step of a nucleolus computation."""

    episode: int
    action: TraceAction
    coalition: int | None
    excess: float | None
    level: float | None
    wall_ms: float

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "action": self.action.value,
            "coalition": self.coalition,
            "c_star": self.excess,
            "z_star": self.level,
            "wall_ms": round(self.wall_ms, 3),
        }


@dataclass(frozen=True, eq=False)
class AllocationResult:
    """An allocation with its quality measures and provenance."""

    allocation: Allocation
    method: AllocationMethod
    dsat: float
    episodes: int
    coalitions_queried: int
    grand_value: float
    labels: tuple[str, ...]
    trace: tuple[TraceRecord, ...] = ()
    fingerprint: str | None = None

    @property
    def satisfied(self) -> bool:
        """Whether no proper coalition pays more than it would on its own."""
        return self.dsat <= SATISFACTION_TOLERANCE

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "allocation": {label: float(share) for label, share in zip(self.labels, self.allocation.x, strict=True)},
            "grand_value": self.grand_value,
            "dsat": self.dsat if math.isfinite(self.dsat) else None,
            "satisfied": "Y" if self.satisfied else "N",
            "episodes": self.episodes,
            "coalitions_queried": self.coalitions_queried,
            "fingerprint": self.fingerprint,
        }


def excess(x, coalition: CoalitionKey, game: CostGame) -> float:
    """``x(S) - v(S)``: how much more ``coalition`` pays under ``x`` than on its own."""
    return float(np.asarray(x, dtype=float)[list(coalition.members())].sum()) - game.value(coalition)


def _indicator(coalition: CoalitionKey, n_players: int) -> np.ndarray:
    row = np.zeros(n_players)
    row[list(coalition.members())] = 1.0
    return row


def _master_builder(
    n_players: int,
    values: Mapping[CoalitionKey, float],
    bindings: Sequence[BindingBlock],
    grand_value: float,
    free: Iterable[CoalitionKey],
    *,
    level: float | None = None,
    floor: float | None = None,
) -> tuple[LinearProgramBuilder, np.ndarray, int]:
    """Rows of the master program: efficiency, ``x(S) - z <= v(S)`` for free ``S``, and the fixed blocks.

    With ``level`` the variable ``z`` is fixed there; with ``floor`` it is bounded below.
    """
    builder = LinearProgramBuilder()
    x = builder.add_variables(n_players, names=[f"x{index + 1}" for index in range(n_players)], lower=-np.inf)
    if level is not None:
        z = builder.add_variable("z", lower=level, upper=level)
    else:
        z = builder.add_variable("z", lower=-np.inf if floor is None else floor)
    builder.add_rows(x[None, :], 1.0, Relation.EQ, grand_value)
    for coalition in free:
        members = x[list(coalition.members())]
        builder.add_rows(np.append(members, z)[None, :], [1.0] * members.size + [-1.0], Relation.LE, values[coalition])
    for block in bindings:
        for coalition in block.coalitions:
            members = x[list(coalition.members())]
            builder.add_rows(members[None, :], 1.0, Relation.EQ, values[coalition] + block.level)
    return builder, x, z


def master_solve(
    values: Mapping[CoalitionKey, float],
    bindings: Sequence[BindingBlock],
    grand_value: float,
    *,
    n_players: int | None = None,
    floor: float | None = None,
) -> tuple[np.ndarray, float]:
    """Minimize the largest excess over the free coalitions in ``values``.

    Free coalitions are those of ``values`` that are neither fixed in
    ``bindings`` nor the grand coalition.

    Returns:
        The allocation and the minimal largest excess ``z``.

    Raises:
        AllocationError: The master program is infeasible or unbounded.
    """
    if n_players is None:
        n_players = max(max(coalition.members()) for coalition in values) + 1
    grand = CoalitionKey.grand(n_players)
    fixed = {coalition for block in bindings for coalition in block.coalitions}
    free = [coalition for coalition in values if coalition not in fixed and coalition != grand]
    builder, x, z = _master_builder(n_players, values, bindings, grand_value, free, floor=floor)
    builder.add_cost([z], [1.0])
    solution = solve_lp(builder.build())
    if not solution.is_optimal:
        logger.error("Master program not optimal: %s", {"status": solution.status.value, "free": len(free)})
        raise AllocationError(f"Master program is {solution.status.value}")
    return solution.primal[x], float(solution.primal[z])


def uniqueness_check(
    n_players: int,
    grand_value: float,
    bindings: Sequence[BindingBlock],
    values: Mapping[CoalitionKey, float],
    tolerance: float = UNIQUENESS_TOLERANCE,
) -> bool:
    """Whether efficiency and the fixed blocks leave exactly one allocation.

    Each component is minimized and maximized over that equality system; an
    unbounded or wide range means further episodes are needed.
    """
    rows = [np.ones(n_players)] + [_indicator(c, n_players) for block in bindings for c in block.coalitions]
    if np.linalg.matrix_rank(np.array(rows)) < n_players:
        return False
    builder, x, _z = _master_builder(n_players, values, bindings, grand_value, (), level=0.0)
    problem = builder.build()
    for index in range(n_players):
        extremes = []
        for sense in (1.0, -1.0):
            objective = np.zeros(problem.num_variables)
            objective[x[index]] = sense
            solution = solve_lp(problem.with_objective(objective))
            if not solution.is_optimal:
                return False
            extremes.append(solution.primal[x[index]])
        if abs(extremes[0] - extremes[1]) > tolerance * max(1.0, abs(extremes[0])):
            return False
    return True


def _identify_bindings(state: EpisodeState, values, grand_value: float, n_players: int, tolerance: float):
    """Coalitions whose excess stays at the master level over the whole optimal face."""
    x, z = state.x, state.z
    free = state.free()
    gaps = {coalition: abs(x[list(coalition.members())].sum() - values[coalition] - z) for coalition in free}
    candidates = [coalition for coalition in free if gaps[coalition] <= tolerance]
    if not candidates:
        tightest = min(free, key=gaps.get)
        logger.warning("No coalition within binding tolerance: %s", {"gap": gaps[tightest], "mask": tightest.mask})
        candidates = [tightest]
    confirmed = []
    builder, variables, _z = _master_builder(n_players, values, state.bindings, grand_value, free, level=z)
    face = builder.build()
    for coalition in candidates:
        objective = np.zeros(face.num_variables)
        objective[variables[list(coalition.members())]] = 1.0
        solution = solve_lp(face.with_objective(objective))
        if solution.is_optimal and solution.objective_value - values[coalition] >= z - tolerance:
            confirmed.append(coalition)
    if not confirmed:
        logger.warning("No binding coalition confirmed on the optimal face: %s", {"candidates": len(candidates)})
        return candidates
    return confirmed


def _lexicographic(game: CostGame, *, generate: bool) -> AllocationResult:
    n = game.n_players
    if n < 2:
        raise AllocationError("The nucleolus needs at least two players")
    started = time.perf_counter()
    queries_before = game.query_count
    trace: list[TraceRecord] = []

    def record(state, action, coalition=None, excess_value=None, level=None):
        trace.append(
            TraceRecord(state.episode, action, coalition, excess_value, level, (time.perf_counter() - started) * 1e3)
        )

    grand = CoalitionKey.grand(n)
    grand_value = game.value(grand)
    initial = [CoalitionKey.singleton(index) for index in range(n)] if generate else list(CoalitionKey.proper(n))
    values = dict(game.values(initial))
    state = EpisodeState(generated=list(initial))
    spread = max(1.0, n * max(abs(value) for value in [grand_value, *values.values()]))
    floor = None
    tolerance = BINDING_TOLERANCE
    retries = 0
    closed: EpisodeState | None = None

    while True:
        if state.episode > 2**n:
            raise AllocationError(f"Nucleolus did not settle within {2 ** n} episodes")
        free = state.free()
        if free:
            try:
                state.x, state.z = master_solve(values, state.bindings, grand_value, n_players=n, floor=floor)
            except AllocationError:
                if closed is None or retries >= BINDING_RETRIES:
                    raise
                retries += 1
                tolerance /= 10.0
                logger.warning("Master infeasible, tightening binding tolerance: %s", {"tolerance": tolerance})
                state.bindings.pop()
                block = _identify_bindings(closed, values, grand_value, n, tolerance)
                state.bindings.append(BindingBlock(tuple(block), closed.z))
                continue
            record(state, TraceAction.MASTER, level=state.z)
        if uniqueness_check(n, grand_value, state.bindings, values):
            break

        exclude = set(state.generated) | {grand}
        if not free:
            found = game.most_violated(state.x, 0.0, exclude, -np.inf) if generate else None
            if found is None:
                raise AllocationError("Every coalition is fixed but the allocation is not unique")
            coalition, largest = found
            state.generated.append(coalition)
            values[coalition] = game.value(coalition)
            record(state, TraceAction.VIOLATE, coalition.mask, largest)
            continue

        found = game.most_violated(state.x, state.z, exclude, VIOLATION_TOLERANCE) if generate else None
        if found is not None:
            coalition, violation = found
            state.generated.append(coalition)
            values[coalition] = game.value(coalition)
            record(state, TraceAction.VIOLATE, coalition.mask, violation, state.z)
            continue

        if floor is not None and state.z <= floor + BINDING_TOLERANCE:
            spread *= 10.0
            floor = state.bindings[-1].level - spread
            logger.debug("Widened master floor: %s", {"episode": state.episode, "floor": floor})
            continue

        block = _identify_bindings(state, values, grand_value, n, tolerance)
        closed = EpisodeState(state.episode, list(state.generated), list(state.bindings), state.x.copy(), state.z)
        state.bindings.append(BindingBlock(tuple(block), state.z))
        record(state, TraceAction.BIND, None, None, state.z)
        logger.info(
            "Closed nucleolus episode: %s",
            {"episode": state.episode, "level": state.z, "fixed": [c.mask for c in block], "generated": len(values)},
        )
        state.episode += 1
        floor = state.z - spread

    allocation = Allocation(state.x)
    queried = game.query_count - queries_before
    dissatisfaction = dsat(game, allocation)
    method = AllocationMethod.NUCLEOLUS
    logger.info(
        "Computed nucleolus: %s",
        {"episodes": state.episode, "queried": queried, "dsat": dissatisfaction, "allocation": allocation.x.tolist()},
    )
    return AllocationResult(
        allocation,
        method,
        dissatisfaction,
        state.episode,
        queried,
        grand_value,
        game.labels,
        tuple(trace),
        game.fingerprint,
    )


def nucleolus(game: CostGame) -> AllocationResult:
    """Nucleolus of ``game`` by constraint generation, starting from the singletons."""
    return _lexicographic(game, generate=True)


def nucleolus_by_enumeration(game: CostGame) -> AllocationResult:
    """Nucleolus of ``game`` with every proper coalition in the master from the start."""
    return _lexicographic(game, generate=False)


def least_core(game: CostGame) -> tuple[Allocation, float]:
    """Allocation minimizing the largest excess over all proper coalitions, and that excess."""
    n = game.n_players
    values = game.values(CoalitionKey.proper(n))
    x, z = master_solve(values, (), game.value(CoalitionKey.grand(n)), n_players=n)
    return Allocation(x), z


def most_violated_coalition(
    game: CostGame, x, z: float, exclude: Iterable[CoalitionKey] = (), threshold: float = VIOLATION_TOLERANCE
) -> tuple[CoalitionKey, float] | None:
    """The proper coalition outside ``exclude`` with the largest ``x(S) - z - v(S)``, if above ``threshold``."""
    return game.most_violated(np.asarray(x, dtype=float), z, set(exclude), threshold)


def dsat(game: CostGame, x) -> float:
    """Largest excess over all proper nonempty coalitions; ``-inf`` for a single player."""
    if game.n_players < 2:
        return -np.inf
    x = x.x if isinstance(x, Allocation) else np.asarray(x, dtype=float)
    found = game.most_violated(x, 0.0, set(), -np.inf)
    return found[1] if found is not None else -np.inf


def dsat_by_enumeration(game: CostGame, x) -> float:
    """Largest excess over all proper nonempty coalitions, evaluating every one of them."""
    if game.n_players > DSAT_ENUMERATION_MAX_PLAYERS:
        raise AllocationError(
            f"Enumerating {2 ** game.n_players - 2} coalitions exceeds the limit of "
            f"{DSAT_ENUMERATION_MAX_PLAYERS} players"
        )
    x = x.x if isinstance(x, Allocation) else np.asarray(x, dtype=float)
    return max((excess(x, coalition, game) for coalition in CoalitionKey.proper(game.n_players)), default=-np.inf)


def in_core(game: CostGame, x, tolerance: float = SATISFACTION_TOLERANCE) -> bool:
    """Whether ``x`` is efficient and leaves no proper coalition with positive excess."""
    x = x.x if isinstance(x, Allocation) else np.asarray(x, dtype=float)
    grand_value = game.value(CoalitionKey.grand(game.n_players))
    if abs(float(x.sum()) - grand_value) > tolerance * max(1.0, abs(grand_value)):
        return False
    return dsat(game, x) <= tolerance


def shapley_weights(n_players: int) -> np.ndarray:
    """Weight ``s! (n - s - 1)! / n!`` of a coalition of size ``s`` joined by one more player."""
    total = math.factorial(n_players)
    return np.array(
        [math.factorial(size) * math.factorial(n_players - size - 1) / total for size in range(n_players)]
    )


def shapley(game: CostGame, *, force: bool = False) -> AllocationResult:
    """Shapley value: each player's average marginal cost over all joining orders.

    Evaluates all ``2^N - 1`` nonempty coalitions.

    Raises:
        AllocationError: The game has more than ``SHAPLEY_MAX_PLAYERS`` players and ``force`` is not set.
    """
    n = game.n_players
    if n > SHAPLEY_MAX_PLAYERS:
        if not force:
            raise AllocationError(
                f"Shapley value of {n} players needs {2 ** n - 1} coalition values; limit is {SHAPLEY_MAX_PLAYERS}"
            )
        logger.warning("Shapley player limit overridden: %s", {"players": n, "limit": SHAPLEY_MAX_PLAYERS})
    queries_before = game.query_count
    masks = np.arange(1 << n)
    values = game.values(CoalitionKey(int(mask)) for mask in masks[1:])
    table = np.zeros(1 << n)
    for coalition, value in values.items():
        table[coalition.mask] = value
    weights = shapley_weights(n)
    sizes = popcounts(n)
    shares = np.empty(n)
    for player in range(n):
        bit = 1 << player
        without = masks[(masks & bit) == 0]
        shares[player] = float(np.sum(weights[sizes[without]] * (table[without | bit] - table[without])))
    allocation = Allocation(shares)
    queried = game.query_count - queries_before
    result = AllocationResult(
        allocation,
        AllocationMethod.SHAPLEY,
        dsat(game, allocation),
        1,
        queried,
        float(table[-1]),
        game.labels,
        fingerprint=game.fingerprint,
    )
    logger.info("Computed Shapley value: %s", {"queried": queried, "allocation": shares.tolist(), "dsat": result.dsat})
    return result


def proportional_split(baseline, opex, capex: float, *, equal_split: bool = False) -> np.ndarray:
    """Share ``capex`` in proportion to each building's opex reduction ``baseline - opex``.

    Raises:
        AllocationError: The reductions sum to a negative amount, or to zero
            and ``equal_split`` is not set.
    """
    reduction = np.asarray(baseline, dtype=float) - np.asarray(opex, dtype=float)
    total = float(reduction.sum())
    if total < -SATISFACTION_TOLERANCE:
        raise AllocationError(f"Operating cost reductions sum to {total:.6g}; proportional shares need a positive sum")
    if total <= SATISFACTION_TOLERANCE:
        if not equal_split:
            raise AllocationError("Operating cost reductions sum to zero; proportional shares are undefined")
        return np.full(reduction.size, capex / reduction.size)
    return capex * reduction / total


def proportional(
    model: CommunityModel, cache: CharacteristicCache | None = None, *, equal_split: bool = False, threads: int = 1
) -> AllocationResult:
    """Each building pays its own operating cost plus a capex share proportional to its cost reduction."""
    game = StorageGame(model, cache, threads)
    queries_before = game.query_count
    grand = game.outcome(model.grand_coalition())
    opex = building_opex(model, grand.schedule)
    baseline = np.array([no_storage_cost(model, index) for index in range(model.n_buildings)])
    shares = opex + proportional_split(baseline, opex, grand.capex, equal_split=equal_split)
    allocation = Allocation(shares)
    queried = game.query_count - queries_before
    result = AllocationResult(
        allocation,
        AllocationMethod.PROPORTIONAL,
        dsat(game, allocation),
        1,
        queried,
        grand.value,
        game.labels,
        fingerprint=game.fingerprint,
    )
    logger.info("Computed proportional allocation: %s", {"allocation": shares.tolist(), "dsat": result.dsat})
    return result
