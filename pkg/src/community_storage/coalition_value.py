"""Characteristic function of the storage game.

The value of a coalition is the optimum of a single linear program that sizes
one shared storage (energy capacity ``E`` and power capacity ``P``) and
schedules every member in every scenario. Per member, scenario and period the
program carries six dispatch variables: charge, discharge, state of charge,
grid purchase, grid sale and net battery power. Each member and scenario adds
one peak grid power variable for the demand charge.

Binary charge/discharge and buy/sell exclusions are relaxed; optimal schedules
are cleaned afterwards by :func:`reconstruct_schedule`.
"""

import concurrent.futures
import io
import json
import logging
import threading
from collections.abc import Iterable
from dataclasses import dataclass
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from community_storage.app_settings import COMPLEMENTARITY_TOLERANCE
from community_storage.choices import ComplementarityKind
from community_storage.choices import Relation
from community_storage.choices import SharingMode
from community_storage.exceptions import ComplementarityError
from community_storage.exceptions import InfeasibleCoalitionError
from community_storage.helpers import atomic_write_text
from community_storage.model import CoalitionKey
from community_storage.model import CommunityModel
from community_storage.solver import LinearProgram
from community_storage.solver import LinearProgramBuilder
from community_storage.solver import MixedIntegerProgram
from community_storage.solver import solve_lp


logger = logging.getLogger("community_storage")

DISPATCH_FIELDS = ("p_ch", "p_dis", "e_b", "p_gplus", "p_gminus", "p_net")
ENERGY_COLUMN = 0
POWER_COLUMN = 1


@dataclass(frozen=True)
class DispatchLayout:
    """Column positions of the capacity and dispatch variables of a sizing or violation program.

    Columns 0 and 1 are ``E`` and ``P``. Then, for each member and scenario,
    six columns per period followed by the peak grid power column.
    """

    members: tuple[int, ...]
    n_scenarios: int
    n_periods: int

    @property
    def block(self) -> int:
        return len(DISPATCH_FIELDS) * self.n_periods + 1

    @property
    def size(self) -> int:
        return 2 + len(self.members) * self.n_scenarios * self.block

    def _starts(self) -> np.ndarray:
        grid = np.arange(len(self.members))[:, None] * self.n_scenarios + np.arange(self.n_scenarios)[None, :]
        return 2 + grid * self.block

    def column(self, name: str) -> np.ndarray:
        """Column indices of a dispatch field, shaped ``(members, scenarios, periods)``."""
        offset = DISPATCH_FIELDS.index(name)
        periods = len(DISPATCH_FIELDS) * np.arange(self.n_periods)
        return self._starts()[:, :, None] + periods[None, None, :] + offset

    def peak(self) -> np.ndarray:
        """Column indices of the peak grid power, shaped ``(members, scenarios)``."""
        return self._starts() + len(DISPATCH_FIELDS) * self.n_periods

    def names(self, model: CommunityModel) -> list[str]:
        names = [""] * self.size
        names[ENERGY_COLUMN], names[POWER_COLUMN] = "E", "P"
        ids, scenario_ids = model.building_ids, model.scenarios.ids
        for position, member in enumerate(self.members):
            for scenario in range(self.n_scenarios):
                label = f"{ids[member]},{scenario_ids[scenario]}"
                for name in DISPATCH_FIELDS:
                    for period, index in enumerate(self.column(name)[position, scenario]):
                        names[index] = f"{name}[{label},{period}]"
                names[self.peak()[position, scenario]] = f"p_gmax[{label}]"
        return names


@dataclass(frozen=True, eq=False)
class DispatchSchedule:
    """Optimal flows of the members of a coalition, arrays indexed ``[member, scenario, period]``.

    ``members`` holds the building indices in row order; ``p_gmax`` is the peak
    grid power per member and scenario.
    """

    members: tuple[int, ...]
    p_ch: np.ndarray
    p_dis: np.ndarray
    e_b: np.ndarray
    p_gplus: np.ndarray
    p_gminus: np.ndarray
    p_gmax: np.ndarray

    @property
    def p_net(self) -> np.ndarray:
        return self.p_ch - self.p_dis

    def position(self, building: int) -> int:
        return self.members.index(building)


@dataclass(frozen=True, eq=False)
class CoalitionOutcome:
    """Optimal sizing and schedule of one coalition; ``value = capex + expected_opex``."""

    coalition: CoalitionKey
    value: float
    energy_capacity: float
    power_capacity: float
    schedule: DispatchSchedule
    expected_opex: float
    capex: float
    fingerprint: str


@dataclass(frozen=True)
class ComplementarityViolation:
    """A pair of flows that are simultaneously positive in one period."""

    building: int
    scenario: int
    period: int
    kind: ComplementarityKind
    product: float


class CharacteristicCache:
    """Thread-safe memo of coalition outcomes keyed by ``(model fingerprint, coalition mask)``.

    ``query_count`` is the number of distinct coalitions ever evaluated, which
    is the characteristic-function query count of an allocation run.
    """

    def __init__(self):
        self._outcomes: dict[tuple[str, int], CoalitionOutcome] = {}
        self._lock = threading.Lock()

    def get(self, model: CommunityModel, coalition: CoalitionKey) -> CoalitionOutcome | None:
        with self._lock:
            return self._outcomes.get((model.fingerprint, coalition.mask))

    def put(self, model: CommunityModel, coalition: CoalitionKey, outcome: CoalitionOutcome):
        with self._lock:
            self._outcomes[(model.fingerprint, coalition.mask)] = outcome

    def __contains__(self, key: tuple[CommunityModel, CoalitionKey]) -> bool:
        model, coalition = key
        with self._lock:
            return (model.fingerprint, coalition.mask) in self._outcomes

    def __len__(self) -> int:
        with self._lock:
            return len(self._outcomes)

    @property
    def query_count(self) -> int:
        return len(self)

    def outcomes(self, model: CommunityModel) -> dict[CoalitionKey, CoalitionOutcome]:
        """Every cached outcome of ``model``."""
        with self._lock:
            return {
                CoalitionKey(mask): outcome
                for (fingerprint, mask), outcome in self._outcomes.items()
                if fingerprint == model.fingerprint
            }


def sizing_layout(model: CommunityModel, coalition: CoalitionKey) -> DispatchLayout:
    return DispatchLayout(coalition.members(), model.scenarios.count, model.scenarios.period_count)


def _add_dispatch(builder: LinearProgramBuilder, model: CommunityModel, layout: DispatchLayout, selectors=None):
    """Bounds, operating costs and rows shared by the sizing program and the violation search.

    With ``selectors`` the balance right-hand side of member ``i`` is scaled by
    its selector variable.
    """
    storage, tariff, scenarios = model.storage, model.tariff, model.scenarios
    dt = scenarios.period_length
    charge, discharge, soc, buy, sell, net = (layout.column(name) for name in DISPATCH_FIELDS)
    peak = layout.peak()
    pooled = model.sharing_mode is SharingMode.POOLED

    builder.set_bounds(charge, 0.0, storage.p_ch_max)
    builder.set_bounds(discharge, 0.0, storage.p_dis_max)
    builder.set_bounds(soc, -np.inf if pooled else 0.0, np.inf)
    builder.set_bounds(buy, 0.0, storage.p_g_max)
    builder.set_bounds(sell, 0.0, storage.p_g_max)
    builder.set_bounds(net, -storage.p_dis_max, storage.p_ch_max)

    weight = scenarios.probabilities[None, :, None] * dt
    builder.add_cost(buy, np.broadcast_to(weight * tariff.purchase[None, None, :], buy.shape))
    builder.add_cost(sell, np.broadcast_to(-weight * tariff.sell[None, None, :], sell.shape))
    builder.add_cost(peak, np.broadcast_to(scenarios.probabilities[None, :] * tariff.demand_charge, peak.shape))

    def flat(*columns):
        return np.stack([column.ravel() for column in columns], axis=1)

    # net battery power
    builder.add_rows(flat(net, charge, discharge), [1.0, -1.0, 1.0], Relation.EQ, 0.0)

    # state of charge, e_t - e_{t-1} - dt eta_ch p_ch + dt / eta_dis p_dis = 0
    gain, loss = -dt * storage.eta_ch, dt / storage.eta_dis
    if layout.n_periods > 1:
        builder.add_rows(
            flat(soc[:, :, 1:], soc[:, :, :-1], charge[:, :, 1:], discharge[:, :, 1:]),
            [1.0, -1.0, gain, loss],
            Relation.EQ,
            0.0,
        )
    if model.periodic_soc:
        builder.add_rows(
            flat(soc[:, :, 0], soc[:, :, -1], charge[:, :, 0], discharge[:, :, 0]),
            [1.0, -1.0, gain, loss],
            Relation.EQ,
            0.0,
        )
    else:
        builder.add_rows(flat(soc[:, :, 0], charge[:, :, 0], discharge[:, :, 0]), [1.0, gain, loss], Relation.EQ, 0.0)

    # power balance
    load = model.net_load[list(layout.members)]
    if selectors is None:
        builder.add_rows(flat(buy, sell, net), [1.0, -1.0, -1.0], Relation.EQ, load.ravel())
    else:
        switch = np.broadcast_to(np.asarray(selectors)[:, None, None], buy.shape)
        values = np.column_stack(
            [np.ones(load.size), -np.ones(load.size), -np.ones(load.size), -load.ravel()]
        )
        builder.add_rows(flat(buy, sell, net, switch), values, Relation.EQ, 0.0)

    # peak grid power
    peak_per_period = np.broadcast_to(peak[:, :, None], buy.shape)
    builder.add_rows(flat(buy, peak_per_period), [1.0, -1.0], Relation.LE, 0.0)
    if not model.demand_charge_import_only:
        builder.add_rows(flat(sell, peak_per_period), [1.0, -1.0], Relation.LE, 0.0)

    # shared capacity, one row per scenario and period
    def across_members(columns, capacity):
        stacked = columns.transpose(1, 2, 0).reshape(-1, len(layout.members))
        return np.column_stack([stacked, np.full(stacked.shape[0], capacity)])

    width = len(layout.members)
    capacity_values = [1.0] * width + [-1.0]
    builder.add_rows(across_members(soc, ENERGY_COLUMN), capacity_values, Relation.LE, 0.0)
    builder.add_rows(across_members(charge, POWER_COLUMN), capacity_values, Relation.LE, 0.0)
    builder.add_rows(across_members(discharge, POWER_COLUMN), capacity_values, Relation.LE, 0.0)
    if pooled:
        builder.add_rows(soc.transpose(1, 2, 0).reshape(-1, width), 1.0, Relation.GE, 0.0)


def _capacity_variables(builder: LinearProgramBuilder, model: CommunityModel, layout: DispatchLayout):
    indices = builder.add_variables(layout.size, names=layout.names(model))
    builder.add_cost([ENERGY_COLUMN, POWER_COLUMN], [model.storage.k_e, model.storage.k_p])
    return indices


def build_sizing_problem(model: CommunityModel, coalition: CoalitionKey) -> LinearProgram:
    """Build the joint sizing and dispatch program of a coalition.

    The program has ``2 + |S| * scenarios * (6 * periods + 1)`` variables.
    """
    coalition = model.validate_coalition(coalition)
    layout = sizing_layout(model, coalition)
    builder = LinearProgramBuilder()
    _capacity_variables(builder, model, layout)
    _add_dispatch(builder, model, layout)
    return builder.build()


def build_violation_problem(
    model: CommunityModel, x, z: float, exclude: Iterable[CoalitionKey]
) -> tuple[MixedIntegerProgram, DispatchLayout, np.ndarray]:
    """Build the program that finds the coalition with the largest ``x(S) - z - v(S)``.

    All buildings carry dispatch variables; binary selector ``s_i`` switches
    building ``i`` in or out. A switched-out building has no load and no flows.
    No-good cuts remove the coalitions in ``exclude`` and the cardinality rows
    keep ``S`` proper and nonempty. The optimum of the program is
    ``-(c* + z)``.

    Returns:
        The program, the dispatch layout, and the selector column indices.
    """
    n = model.n_buildings
    x = np.asarray(x, dtype=float)
    storage = model.storage
    layout = DispatchLayout(tuple(range(n)), model.scenarios.count, model.scenarios.period_count)
    builder = LinearProgramBuilder()
    _capacity_variables(builder, model, layout)
    selectors = builder.add_variables(
        n, names=[f"s[{building_id}]" for building_id in model.building_ids], lower=0.0, upper=1.0, cost=-x
    )
    _add_dispatch(builder, model, layout, selectors)

    switch = np.broadcast_to(selectors[:, None, None], layout.column("p_ch").shape).ravel()
    for name, limit in (
        ("p_ch", storage.p_ch_max),
        ("p_dis", storage.p_dis_max),
        ("p_gplus", storage.p_g_max),
        ("p_gminus", storage.p_g_max),
    ):
        builder.add_rows(np.column_stack([layout.column(name).ravel(), switch]), [1.0, -limit], Relation.LE, 0.0)
    if model.periodic_soc and model.sharing_mode is SharingMode.POOLED:
        # a cyclic state of charge is only pinned down up to a constant; keep idle buildings at zero
        reach = n * model.scenarios.period_count * model.scenarios.period_length
        bound = 2.0 * reach * max(storage.p_ch_max * storage.eta_ch, storage.p_dis_max / storage.eta_dis)
        soc = layout.column("e_b").ravel()
        builder.add_rows(np.column_stack([soc, switch]), [1.0, -bound], Relation.LE, 0.0)
        builder.add_rows(np.column_stack([soc, switch]), [1.0, bound], Relation.GE, 0.0)

    builder.add_rows(selectors[None, :], 1.0, Relation.GE, 1.0)
    builder.add_rows(selectors[None, :], 1.0, Relation.LE, n - 1.0)
    for key in sorted(set(exclude)):
        if not key.is_proper(n):
            continue
        inside = np.array([index in key for index in range(n)])
        # at least one selector differs from the excluded pattern
        builder.add_row(
            dict(zip(selectors.tolist(), np.where(inside, -1.0, 1.0).tolist(), strict=True)),
            Relation.GE,
            1.0 - key.size,
        )
    problem = MixedIntegerProgram(builder.build(), frozenset(selectors.tolist()))
    return problem, layout, selectors


def _schedule_from_primal(primal: np.ndarray, layout: DispatchLayout, pooled: bool) -> DispatchSchedule:
    def take(name, signed=False):
        values = primal[layout.column(name)]
        return values if signed else np.maximum(values, 0.0)

    return DispatchSchedule(
        members=layout.members,
        p_ch=take("p_ch"),
        p_dis=take("p_dis"),
        e_b=take("e_b", signed=pooled),
        p_gplus=take("p_gplus"),
        p_gminus=take("p_gminus"),
        p_gmax=np.maximum(primal[layout.peak()], 0.0),
    )


def building_opex(model: CommunityModel, schedule: DispatchSchedule) -> np.ndarray:
    """Expected daily operating cost of each member of ``schedule``, in member order."""
    tariff, scenarios = model.tariff, model.scenarios
    energy = scenarios.period_length * (
        schedule.p_gplus * tariff.purchase[None, None, :] - schedule.p_gminus * tariff.sell[None, None, :]
    ).sum(axis=2)
    return (energy + tariff.demand_charge * schedule.p_gmax) @ scenarios.probabilities


def schedule_cost(model: CommunityModel, schedule: DispatchSchedule, building: int) -> float:
    """Expected daily operating cost of one building under ``schedule``."""
    return float(building_opex(model, schedule)[schedule.position(building)])


def no_storage_cost(model: CommunityModel, building: int) -> float:
    """Expected daily cost of a building that buys its deficit and sells its surplus without storage."""
    load = model.net_load[building]
    buy, sell = np.maximum(load, 0.0), np.maximum(-load, 0.0)
    peak = buy.max(axis=1) if model.demand_charge_import_only else np.maximum(buy, sell).max(axis=1)
    tariff, scenarios = model.tariff, model.scenarios
    energy = scenarios.period_length * (buy * tariff.purchase - sell * tariff.sell).sum(axis=1)
    return float((energy + tariff.demand_charge * peak) @ scenarios.probabilities)


def find_complementarity_violations(
    schedule: DispatchSchedule, tolerance: float = COMPLEMENTARITY_TOLERANCE
) -> list[ComplementarityViolation]:
    """Periods in which charge and discharge, or purchase and sale, are both positive."""
    violations = []
    for kind, first, second in (
        (ComplementarityKind.STORAGE, schedule.p_ch, schedule.p_dis),
        (ComplementarityKind.GRID, schedule.p_gplus, schedule.p_gminus),
    ):
        product = first * second
        for position, scenario, period in zip(*np.nonzero(product > tolerance), strict=True):
            violations.append(
                ComplementarityViolation(
                    building=schedule.members[position],
                    scenario=int(scenario),
                    period=int(period),
                    kind=kind,
                    product=float(product[position, scenario, period]),
                )
            )
    return violations


def reconstruct_schedule(model: CommunityModel, schedule: DispatchSchedule) -> DispatchSchedule:
    """Remove simultaneous charge/discharge and purchase/sale while keeping the state of charge.

    Where both flows are positive the smaller battery-side energy is netted out
    of the larger, so ``eta_ch p_ch - p_dis / eta_dis`` is unchanged. Grid flows
    are then recomputed from the power balance and the peaks from the new grid
    flows.
    """
    storage = model.storage
    charge, discharge = schedule.p_ch, schedule.p_dis
    both = (charge > 0.0) & (discharge > 0.0)
    stored = charge * storage.eta_ch - discharge / storage.eta_dis
    new_charge = np.where(both, np.where(stored >= 0.0, stored / storage.eta_ch, 0.0), charge)
    new_discharge = np.where(both, np.where(stored < 0.0, -stored * storage.eta_dis, 0.0), discharge)
    grid = schedule.p_gplus - schedule.p_gminus + (new_charge - new_discharge) - schedule.p_net
    buy, sell = np.maximum(grid, 0.0), np.maximum(-grid, 0.0)
    peak = buy.max(axis=2) if model.demand_charge_import_only else np.maximum(buy, sell).max(axis=2)
    return replace(schedule, p_ch=new_charge, p_dis=new_discharge, p_gplus=buy, p_gminus=sell, p_gmax=peak)


def verify_complementarity(
    model: CommunityModel, outcome: CoalitionOutcome, tolerance: float = COMPLEMENTARITY_TOLERANCE
) -> list[ComplementarityViolation]:
    """Check an outcome's schedule for simultaneous flows.

    Returns:
        The violations found; empty when the schedule is clean. A schedule with
        violations is accepted only if :func:`reconstruct_schedule` leaves the
        operating cost unchanged within ``tolerance`` and removes them.

    Raises:
        ComplementarityError: The reconstruction changes the cost or leaves violations behind.
    """
    violations = find_complementarity_violations(outcome.schedule, tolerance)
    if not violations:
        return []
    cleaned = reconstruct_schedule(model, outcome.schedule)
    change = float(building_opex(model, cleaned).sum() - building_opex(model, outcome.schedule).sum())
    remaining = find_complementarity_violations(cleaned, tolerance)
    if abs(change) > tolerance or remaining:
        logger.error(
            "Schedule reconstruction failed: %s",
            {"coalition": outcome.coalition.mask, "violations": len(violations), "cost_change": change},
        )
        raise ComplementarityError(remaining or violations, change)
    return violations


def evaluate_coalition(
    model: CommunityModel, coalition: CoalitionKey, cache: CharacteristicCache | None = None
) -> CoalitionOutcome:
    """Return the optimal sizing, schedule and cost of ``coalition``, through ``cache``.

    Raises:
        CoalitionError: The coalition is empty or names buildings outside the community.
        InfeasibleCoalitionError: The sizing program has no optimal solution.
        ComplementarityError: The optimal schedule cannot be made complementary at equal cost.
    """
    coalition = model.validate_coalition(coalition)
    if cache is not None:
        cached = cache.get(model, coalition)
        if cached is not None:
            return cached
    problem = build_sizing_problem(model, coalition)
    solution = solve_lp(problem)
    label = coalition.label(model.building_ids)
    if not solution.is_optimal:
        logger.error("Coalition program not optimal: %s", {"coalition": label, "status": solution.status.value})
        raise InfeasibleCoalitionError(label, solution.status.value)

    layout = sizing_layout(model, coalition)
    pooled = model.sharing_mode is SharingMode.POOLED
    energy = max(float(solution.primal[ENERGY_COLUMN]), 0.0)
    power = max(float(solution.primal[POWER_COLUMN]), 0.0)
    capex = model.storage.k_e * energy + model.storage.k_p * power
    outcome = CoalitionOutcome(
        coalition=coalition,
        value=solution.objective_value,
        energy_capacity=energy,
        power_capacity=power,
        schedule=_schedule_from_primal(solution.primal, layout, pooled),
        expected_opex=solution.objective_value - capex,
        capex=capex,
        fingerprint=model.fingerprint,
    )
    if verify_complementarity(model, outcome):
        logger.warning("Reconstructed complementary schedule: %s", {"coalition": label})
        outcome = replace(outcome, schedule=reconstruct_schedule(model, outcome.schedule))
    if cache is not None:
        cache.put(model, coalition, outcome)
    logger.info(
        "Evaluated coalition: %s",
        {
            "coalition": label,
            "value": round(outcome.value, 6),
            "energy": round(energy, 6),
            "power": round(power, 6),
            "iterations": solution.iterations,
            "queries": cache.query_count if cache is not None else None,
        },
    )
    return outcome


def evaluate_many(
    model: CommunityModel, coalitions: Iterable[CoalitionKey], cache: CharacteristicCache, threads: int = 1
) -> dict[CoalitionKey, CoalitionOutcome]:
    """Evaluate several coalitions, in parallel when ``threads > 1``."""
    coalitions = list(dict.fromkeys(coalitions))
    if threads <= 1 or len(coalitions) <= 1:
        return {coalition: evaluate_coalition(model, coalition, cache) for coalition in coalitions}
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {coalition: executor.submit(evaluate_coalition, model, coalition, cache) for coalition in coalitions}
        return {coalition: future.result() for coalition, future in futures.items()}


def ies_outcome(model: CommunityModel, building: int, cache: CharacteristicCache | None = None) -> CoalitionOutcome:
    """Outcome of a building that sizes and operates storage on its own."""
    return evaluate_coalition(model, CoalitionKey.singleton(building), cache)


def schedule_frame(model: CommunityModel, outcome: CoalitionOutcome) -> pd.DataFrame:
    """Long-format table of an outcome's schedule."""
    schedule = outcome.schedule
    members, scenarios, periods = np.meshgrid(
        np.arange(len(schedule.members)),
        np.arange(model.scenarios.count),
        np.arange(model.scenarios.period_count),
        indexing="ij",
    )
    ids = np.array(model.building_ids)[np.array(schedule.members)]
    peak = np.broadcast_to(schedule.p_gmax[:, :, None], schedule.p_ch.shape)
    return pd.DataFrame(
        {
            "building_id": ids[members.ravel()],
            "scenario_id": np.array(model.scenarios.ids)[scenarios.ravel()],
            "period": periods.ravel(),
            "p_ch": schedule.p_ch.ravel(),
            "p_dis": schedule.p_dis.ravel(),
            "e_b": schedule.e_b.ravel(),
            "p_gplus": schedule.p_gplus.ravel(),
            "p_gminus": schedule.p_gminus.ravel(),
            "p_gmax": peak.ravel(),
        }
    )


def outcome_summary(model: CommunityModel, outcome: CoalitionOutcome) -> dict:
    """JSON-ready summary of an outcome."""
    opex = building_opex(model, outcome.schedule)
    ids = model.building_ids
    return {
        "coalition": list(outcome.coalition.label(model.building_ids).split(",")),
        "sharing_mode": model.sharing_mode.value,
        "value": outcome.value,
        "energy_capacity": outcome.energy_capacity,
        "power_capacity": outcome.power_capacity,
        "capex": outcome.capex,
        "expected_opex": outcome.expected_opex,
        "building_opex": {
            ids[member]: float(cost) for member, cost in zip(outcome.schedule.members, opex, strict=True)
        },
        "fingerprint": outcome.fingerprint,
    }


def write_schedule(outcome: CoalitionOutcome, model: CommunityModel, directory) -> tuple[Path, Path]:
    """Write ``schedule.csv`` and ``value.json`` for an outcome."""
    directory = Path(directory)
    buffer = io.StringIO()
    schedule_frame(model, outcome).to_csv(buffer, index=False, lineterminator="\n")
    csv_path = atomic_write_text(directory / "schedule.csv", buffer.getvalue())
    summary = json.dumps(outcome_summary(model, outcome), indent=2) + "\n"
    json_path = atomic_write_text(directory / "value.json", summary)
    logger.info("Wrote schedule: %s", {"schedule": str(csv_path), "summary": str(json_path)})
    return csv_path, json_path
