"""Pytest configuration: fixture games, small communities and independent oracles."""

import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import linprog

from community_storage.choices import Relation
from community_storage.choices import SharingMode
from community_storage.games import TabularGame
from community_storage.model import BuildingProfile
from community_storage.model import CoalitionKey
from community_storage.model import CommunityModel
from community_storage.model import ScenarioSet
from community_storage.model import StorageParams
from community_storage.model import Tariff
from community_storage.synthetic import generate_community


FIXTURES = Path(__file__).parent / "fixtures"


def make_community(
    demand,
    renewable=None,
    *,
    purchase,
    sell=0.0,
    demand_charge=0.0,
    k_e=0.0,
    k_p=0.0,
    eta=1.0,
    probabilities=None,
    period_length=1.0,
    sharing_mode=SharingMode.PER_BUILDING,
    periodic_soc=False,
    demand_charge_import_only=False,
    ids=None,
) -> CommunityModel:
    """Build a community from per-building ``[scenario][period]`` demand lists."""
    demand = [np.atleast_2d(np.asarray(profile, dtype=float)) for profile in demand]
    if renewable is None:
        renewable = [np.zeros_like(profile) for profile in demand]
    else:
        renewable = [np.atleast_2d(np.asarray(profile, dtype=float)) for profile in renewable]
    n_scenarios, n_periods = demand[0].shape
    ids = ids or [f"B{index + 1}" for index in range(len(demand))]
    return CommunityModel(
        buildings=tuple(
            BuildingProfile(building_id, load, solar)
            for building_id, load, solar in zip(ids, demand, renewable, strict=True)
        ),
        scenarios=ScenarioSet(
            np.full(n_scenarios, 1.0 / n_scenarios) if probabilities is None else probabilities,
            n_periods,
            period_length,
        ),
        tariff=Tariff(purchase=purchase, sell=sell, demand_charge=demand_charge),
        storage=StorageParams(k_e=k_e, k_p=k_p, eta_ch=eta, eta_dis=eta),
        sharing_mode=sharing_mode,
        periodic_soc=periodic_soc,
        demand_charge_import_only=demand_charge_import_only,
    )


def random_game(rng: np.random.Generator, n_players: int) -> TabularGame:
    """Integer-valued subadditive cost game.

    A coalition costs its cheapest split into two parts less a random saving,
    so ``v(S | T) <= v(S) + v(T)`` for disjoint ``S, T``.
    """
    size = 1 << n_players
    table = np.zeros(size)
    for mask in range(1, size):
        members = [index for index in range(n_players) if mask >> index & 1]
        if len(members) == 1:
            table[mask] = float(rng.integers(5, 20))
            continue
        best = min(table[sub] + table[mask ^ sub] for sub in range(1, mask) if sub & mask == sub)
        table[mask] = best - float(rng.integers(0, 4))
    return TabularGame({CoalitionKey(mask): table[mask] for mask in range(1, size)}, n_players)


def nucleolus_oracle(table: np.ndarray, n_players: int, tolerance: float = 1e-9) -> np.ndarray:
    """Sequential full-enumeration nucleolus solved with HiGHS.

    Each round minimizes the largest excess over the coalitions not yet fixed,
    then fixes every coalition whose excess cannot fall below that level on
    the optimal face, until the fixed equalities determine the allocation.
    """
    grand = (1 << n_players) - 1
    incidence = np.array([[mask >> index & 1 for index in range(n_players)] for mask in range(grand + 1)], dtype=float)
    free = list(range(1, grand))
    fixed: list[tuple[int, float]] = []
    bounds = [(None, None)] * (n_players + 1)

    def constraints(level=None):
        a_ub = [np.append(incidence[mask], -1.0) for mask in free]
        b_ub = [table[mask] for mask in free]
        a_eq = [np.append(np.ones(n_players), 0.0)] + [np.append(incidence[mask], 0.0) for mask, _ in fixed]
        b_eq = [table[grand]] + [table[mask] + value for mask, value in fixed]
        if level is not None:
            a_eq.append(np.append(np.zeros(n_players), 1.0))
            b_eq.append(level)
        return (np.array(a_ub) if a_ub else None), (np.array(b_ub) if b_ub else None), np.array(a_eq), np.array(b_eq)

    while free:
        a_ub, b_ub, a_eq, b_eq = constraints()
        cost = np.append(np.zeros(n_players), 1.0)
        level = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs").fun
        a_ub, b_ub, a_eq, b_eq = constraints(level)
        newly = []
        for mask in free:
            objective = np.append(incidence[mask], 0.0)
            low = linprog(objective, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs").fun
            if low - table[mask] >= level - 1e-7:
                newly.append(mask)
        assert newly, f"no coalition fixed at level {level}"
        fixed.extend((mask, level) for mask in newly)
        free = [mask for mask in free if mask not in newly]
        rows = np.array([np.ones(n_players)] + [incidence[mask] for mask, _ in fixed])
        if np.linalg.matrix_rank(rows, tol=tolerance) == n_players:
            break
    a_ub, b_ub, a_eq, b_eq = constraints()
    solution = linprog(np.zeros(n_players + 1), A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    return solution.x[:n_players]


def linprog_oracle(problem) -> float | None:
    """Optimal objective of a :class:`LinearProgram` by HiGHS, ``None`` when not optimal."""
    dense = problem.matrix.toarray()
    kinds = np.array([relation.value for relation in problem.relations])
    le, ge, eq = kinds == Relation.LE.value, kinds == Relation.GE.value, kinds == Relation.EQ.value
    a_ub = np.vstack([dense[le], -dense[ge]])
    b_ub = np.concatenate([problem.rhs[le], -problem.rhs[ge]])
    bounds = [
        (None if np.isinf(lower) else lower, None if np.isinf(upper) else upper)
        for lower, upper in zip(problem.lower, problem.upper, strict=True)
    ]
    result = linprog(
        problem.objective,
        A_ub=a_ub if a_ub.size else None,
        b_ub=b_ub if b_ub.size else None,
        A_eq=dense[eq] if eq.any() else None,
        b_eq=problem.rhs[eq] if eq.any() else None,
        bounds=bounds,
        method="highs",
    )
    return float(result.fun) if result.status == 0 else None


def vertex_oracle(cost, a_ub, b_ub, upper) -> float:
    """Minimum of ``cost @ x`` over ``a_ub x <= b_ub, 0 <= x <= upper`` by enumerating every basic solution."""
    n = cost.size
    rows = np.vstack([a_ub, -np.eye(n), np.eye(n)])
    rhs = np.concatenate([b_ub, np.zeros(n), upper])
    choices = np.array(list(itertools.combinations(range(rows.shape[0]), n)))
    systems = rows[choices]
    regular = np.abs(np.linalg.det(systems)) > 1e-9
    points = np.linalg.solve(systems[regular], rhs[choices[regular]][..., None])[..., 0]
    feasible = np.all(points @ rows.T <= rhs + 1e-9, axis=1)
    return float((points[feasible] @ cost).min())


def binary_oracle(cost, a_ub, b_ub) -> float:
    """Minimum of ``cost @ s`` over binary ``s`` with ``a_ub s <= b_ub``, by exhaustive enumeration."""
    n = cost.size
    assignments = ((np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    feasible = np.all(assignments @ a_ub.T <= b_ub + 1e-9, axis=1)
    return float((assignments[feasible] @ cost).min())


@pytest.fixture
def symmetric_game():
    """Three players: singletons 10, pairs 14, grand coalition 18."""
    return TabularGame.from_json(FIXTURES / "symmetric_game.json")


@pytest.fixture
def asymmetric_game():
    """Three players with distinct stand-alone costs."""
    return TabularGame.from_json(FIXTURES / "asymmetric_game.json")


@pytest.fixture
def game_files():
    """Paths of the committed fixture games."""
    return {name: FIXTURES / f"{name}.json" for name in ("symmetric_game", "asymmetric_game")}


@pytest.fixture
def two_building_files():
    """Profiles and config of the committed two-building community."""
    return FIXTURES / "two_buildings" / "profiles.csv", FIXTURES / "two_buildings" / "config.toml"


@pytest.fixture
def witness_files():
    """Profiles and config of the community on which proportional sharing is unfair."""
    return FIXTURES / "proportional_witness" / "profiles.csv", FIXTURES / "proportional_witness" / "config.toml"


@pytest.fixture(scope="session")
def small_community():
    """Three synthetic buildings, two scenarios of four six-hour periods."""
    return generate_community(3, 2, 4, seed=11)


@pytest.fixture(scope="session")
def community_five():
    """Five synthetic buildings, two scenarios of four periods."""
    return generate_community(5, 2, 4, seed=5)


@pytest.fixture(scope="session")
def community_ten():
    """Ten synthetic buildings, one scenario of four periods."""
    return generate_community(10, 1, 4, seed=10)


@pytest.fixture
def write_game(tmp_path):
    """Write a game as JSON and return its path."""

    def write(players, values, name="game.json"):
        path = tmp_path / name
        path.write_text(json.dumps({"players": list(players), "values": values}), encoding="utf-8")
        return path

    return write
