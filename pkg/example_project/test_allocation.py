"""Test cases for cost games and the allocation methods."""

import dataclasses
import itertools

import numpy as np
import pytest

from community_storage import games
from community_storage.allocation import Allocation
from community_storage.allocation import BindingBlock
from community_storage.allocation import dsat
from community_storage.allocation import dsat_by_enumeration
from community_storage.allocation import excess
from community_storage.allocation import in_core
from community_storage.allocation import least_core
from community_storage.allocation import master_solve
from community_storage.allocation import most_violated_coalition
from community_storage.allocation import nucleolus
from community_storage.allocation import nucleolus_by_enumeration
from community_storage.allocation import proportional
from community_storage.allocation import proportional_split
from community_storage.allocation import shapley
from community_storage.allocation import shapley_weights
from community_storage.allocation import uniqueness_check
from community_storage.choices import AllocationMethod
from community_storage.choices import SolveStatus
from community_storage.choices import TraceAction
from community_storage.coalition_value import CharacteristicCache
from community_storage.coalition_value import build_violation_problem
from community_storage.exceptions import AllocationError
from community_storage.exceptions import CoalitionError
from community_storage.exceptions import SolverError
from community_storage.games import StorageGame
from community_storage.games import TabularGame
from community_storage.model import CoalitionKey
from community_storage.model import load_community
from community_storage.solver import LpSolution
from community_storage.solver import solve_lp
from community_storage.synthetic import generate_community
from example_project.conftest import linprog_oracle
from example_project.conftest import nucleolus_oracle
from example_project.conftest import random_game


def permutation_shapley(table, n_players):
    """Average marginal cost over every joining order."""
    shares = np.zeros(n_players)
    orders = list(itertools.permutations(range(n_players)))
    for order in orders:
        mask = 0
        for player in order:
            shares[player] += table[mask | 1 << player] - table[mask]
            mask |= 1 << player
    return shares / len(orders)


def game_from_table(values, n_players):
    """Tabular game from a list of values indexed by mask, starting at mask 1."""
    return TabularGame({CoalitionKey(mask): value for mask, value in enumerate(values, start=1)}, n_players)


def storage_table(game):
    """Value of every coalition of a storage game, indexed by mask."""
    table = np.zeros(1 << game.n_players)
    for mask in range(1, table.size):
        table[mask] = game.value(CoalitionKey(mask))
    return table


def relabelled(game, order):
    """Tabular game whose player ``i`` is player ``order[i]`` of ``game``."""
    values = {}
    for mask in range(1, 1 << game.n_players):
        source = sum(1 << player for index, player in enumerate(order) if mask >> index & 1)
        values[CoalitionKey(mask)] = game.table[source]
    return TabularGame(values, game.n_players)


class TestTabularGame:
    """Test cases for games given by a table."""

    def test_from_json(self, symmetric_game):
        """Test that the fixture game loads with its labels and values."""
        assert symmetric_game.n_players == 3
        assert symmetric_game.labels == ("1", "2", "3")
        assert symmetric_game.value(CoalitionKey(0b011)) == 14.0
        assert symmetric_game.value(CoalitionKey(0b111)) == 18.0

    def test_query_count(self, symmetric_game):
        """Test that distinct coalition reads are counted once."""
        symmetric_game.value(CoalitionKey(1))
        symmetric_game.value(CoalitionKey(1))
        symmetric_game.values([CoalitionKey(2), CoalitionKey(3)])
        assert symmetric_game.query_count == 3
        assert symmetric_game.table[5] == 14.0
        assert symmetric_game.query_count == 3

    def test_missing_coalition(self, write_game):
        """Test that a game must value every coalition."""
        path = write_game(["a", "b"], {"a": 1, "b": 2})
        with pytest.raises(CoalitionError, match="a,b"):
            TabularGame.from_json(path)

    def test_unknown_player(self, write_game):
        """Test that values may only name known players."""
        path = write_game(["a"], {"a": 1, "z": 2})
        with pytest.raises(CoalitionError, match="'z'"):
            TabularGame.from_json(path)

    def test_unreadable_file(self, tmp_path):
        """Test that a malformed game file is a coalition error."""
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(CoalitionError):
            TabularGame.from_json(path)
        with pytest.raises(CoalitionError):
            TabularGame.from_json(tmp_path / "absent.json")

    def test_most_violated_matches_enumeration(self):
        """Test the table search against a direct scan of every proper coalition."""
        rng = np.random.default_rng(2)
        for n in range(2, 7):
            game = random_game(rng, n)
            x = rng.uniform(0.0, 10.0, n)
            exclude = {CoalitionKey(int(mask)) for mask in rng.integers(1, (1 << n) - 1, 2)}
            found = game.most_violated(x, 0.5, exclude, -np.inf)
            candidates = [key for key in CoalitionKey.proper(n) if key not in exclude]
            if not candidates:
                assert found is None
                continue
            best = max(x[list(key.members())].sum() - game.table[key.mask] - 0.5 for key in candidates)
            assert found[1] == pytest.approx(best)
            assert found[0] in candidates

    def test_most_violated_threshold(self, symmetric_game):
        """Test that nothing above the threshold returns no coalition."""
        assert most_violated_coalition(symmetric_game, [6.0, 6.0, 6.0], -2.0) is None
        singletons = [CoalitionKey.singleton(index) for index in range(3)]
        key, violation = most_violated_coalition(symmetric_game, [6.0, 6.0, 6.0], -4.0, singletons)
        assert key.size == 2
        assert violation == pytest.approx(2.0)


class TestMasterProgram:
    """Test cases for the master program and the uniqueness check."""

    def test_full_family(self, symmetric_game):
        """Test the symmetric game with every coalition in the master."""
        values = symmetric_game.values(CoalitionKey.proper(3))
        x, z = master_solve(values, (), 18.0, n_players=3)
        assert x == pytest.approx([6.0, 6.0, 6.0], abs=1e-7)
        assert z == pytest.approx(-2.0, abs=1e-7)

    def test_singletons_only(self, symmetric_game):
        """Test the symmetric game with only the singletons in the master."""
        values = symmetric_game.values(CoalitionKey.singleton(i) for i in range(3))
        _x, z = master_solve(values, (), 18.0, n_players=3)
        assert z == pytest.approx(-4.0, abs=1e-7)

    def test_floor(self, symmetric_game):
        """Test that the floor bounds the level from below."""
        values = symmetric_game.values([CoalitionKey(1)])
        _x, z = master_solve(values, (), 18.0, n_players=3, floor=-100.0)
        assert z == pytest.approx(-100.0, abs=1e-7)

    def test_unbounded_master(self, symmetric_game):
        """Test that a master with no floor and too few rows is an allocation error."""
        values = symmetric_game.values([CoalitionKey(1)])
        with pytest.raises(AllocationError):
            master_solve(values, (), 18.0, n_players=3)

    def test_uniqueness(self, symmetric_game):
        """Test that two fixed pairs plus efficiency leave one allocation and one pair does not."""
        values = symmetric_game.values(CoalitionKey.proper(3))
        one_pair = [BindingBlock((CoalitionKey(0b011),), -2.0)]
        two_pairs = [BindingBlock((CoalitionKey(0b011), CoalitionKey(0b101)), -2.0)]
        assert not uniqueness_check(3, 18.0, one_pair, values)
        assert uniqueness_check(3, 18.0, two_pairs, values)


class TestNucleolus:
    """Test cases for the nucleolus."""

    def test_symmetric(self, symmetric_game):
        """Test the equal split of the symmetric game."""
        result = nucleolus(symmetric_game)
        assert result.allocation.x == pytest.approx([6.0, 6.0, 6.0], abs=1e-6)
        assert result.dsat == pytest.approx(-2.0, abs=1e-6)
        assert result.method is AllocationMethod.NUCLEOLUS
        assert result.satisfied

    def test_asymmetric(self, asymmetric_game):
        """Test the hand-computed nucleolus of the asymmetric game."""
        result = nucleolus(asymmetric_game)
        assert result.allocation.x == pytest.approx([10 / 3, 16 / 3, 28 / 3], abs=1e-6)
        assert result.dsat == pytest.approx(-1 / 3, abs=1e-6)
        assert result.allocation.x == pytest.approx(nucleolus_oracle(asymmetric_game.table, 3), abs=1e-6)

    def test_trace(self, symmetric_game):
        """Test that the trace records masters, generated coalitions and closed episodes."""
        result = nucleolus(symmetric_game)
        actions = [record.action for record in result.trace]
        assert actions[0] is TraceAction.MASTER
        assert TraceAction.VIOLATE in actions
        assert TraceAction.BIND in actions
        assert result.trace[0].to_dict()["action"] == "master"

    def test_generation_matches_enumeration(self):
        """Test that generating coalitions gives the same allocation as listing them all."""
        rng = np.random.default_rng(23)
        for n in (3, 4, 5):
            table = random_game(rng, n).table
            generated = nucleolus(game_from_table(table[1:], n))
            enumerated = nucleolus_by_enumeration(game_from_table(table[1:], n))
            assert generated.allocation.x == pytest.approx(enumerated.allocation.x, abs=1e-6)
            assert enumerated.coalitions_queried == (1 << n) - 1

    def test_in_least_core(self):
        """Test that the nucleolus attains the least-core level."""
        game = random_game(np.random.default_rng(31), 4)
        result = nucleolus(game)
        _x, level = least_core(game)
        assert dsat_by_enumeration(game, result.allocation) == pytest.approx(level, abs=1e-6)

    def test_single_player(self):
        """Test that a one-player game has no nucleolus to compute."""
        with pytest.raises(AllocationError):
            nucleolus(TabularGame({CoalitionKey(1): 5.0}, 1))

    def test_storage_game_matches_oracle(self, small_community):
        """Test the nucleolus of a synthetic community against full enumeration of its coalitions."""
        game = StorageGame(small_community)
        result = nucleolus(game)
        table = np.zeros(8)
        for mask in range(1, 8):
            table[mask] = game.value(CoalitionKey(mask))
        assert result.allocation.x == pytest.approx(nucleolus_oracle(table, 3), abs=1e-5)
        assert result.allocation.total() == pytest.approx(table[7], abs=1e-6)
        assert result.fingerprint == small_community.fingerprint

    def test_witness(self, witness_files):
        """Test that the nucleolus of an additive community charges each building its own cost."""
        model = load_community(*witness_files)
        result = nucleolus(StorageGame(model))
        assert result.allocation.x == pytest.approx([1.25, 1.25, 5.0], abs=1e-6)
        assert result.dsat == pytest.approx(0.0, abs=1e-6)
        assert result.to_dict()["satisfied"] == "Y"


class TestStorageGameSearch:
    """Test cases for the binary violation search of the storage game."""

    def test_matches_enumeration(self, small_community):
        """Test the search against the excess of every proper coalition."""
        game = StorageGame(small_community, CharacteristicCache())
        values = {key: game.value(key) for key in CoalitionKey.proper(3)}
        grand = game.value(CoalitionKey.grand(3))
        x = np.full(3, grand / 3.0)
        for exclude in ((), (max(values, key=lambda key: x[list(key.members())].sum() - values[key]),)):
            found = game.most_violated(x, 0.0, set(exclude), -np.inf)
            expected = max(x[list(key.members())].sum() - value for key, value in values.items() if key not in exclude)
            assert found[1] == pytest.approx(expected, abs=1e-5)
            assert found[0] not in exclude

    def test_threshold(self, witness_files):
        """Test that the search returns nothing when no coalition exceeds the threshold."""
        model = load_community(*witness_files)
        game = StorageGame(model)
        assert game.most_violated(np.array([1.25, 1.25, 5.0]), 0.0, set(), 1e-6) is None

    def test_dsat_agrees_with_enumeration(self, witness_files):
        """Test that both dissatisfaction routes agree."""
        game = StorageGame(load_community(*witness_files))
        x = [1.5, 1.5, 4.5]
        assert dsat(game, x) == pytest.approx(0.5, abs=1e-6)
        assert dsat_by_enumeration(game, x) == pytest.approx(0.5, abs=1e-6)

    def test_relaxation_of_a_feasible_search(self):
        """Test a search program whose relaxation has a feasible optimum despite many degenerate pivots."""
        model = generate_community(3, 2, 6, seed=12)
        x = np.array([63.5566, 98.2663, 85.4474])
        problem, _layout, _selectors = build_violation_problem(model, x, 0.0, ())
        relaxed = solve_lp(problem.base)
        assert relaxed.is_optimal
        assert relaxed.max_violation(problem.base) <= 1e-7
        assert relaxed.objective_value == pytest.approx(linprog_oracle(problem.base), abs=1e-5)
        game = StorageGame(model)
        assert dsat(game, x) == pytest.approx(dsat_by_enumeration(game, x), abs=1e-5)
        assert dsat(game, x) == pytest.approx(56.0657, abs=1e-3)

    def test_failed_search_raises(self, small_community, monkeypatch):
        """Test that a search program without an optimum is an error, not an empty answer."""
        monkeypatch.setattr(games, "solve_milp", lambda problem: LpSolution(SolveStatus.INFEASIBLE, np.inf))
        game = StorageGame(small_community)
        with pytest.raises(SolverError):
            game.most_violated(np.zeros(3), 0.0, set(), -np.inf)
        with pytest.raises(SolverError):
            dsat(game, np.zeros(3))

    def test_everything_excluded(self, small_community, monkeypatch):
        """Test that excluding every proper coalition ends the search without solving."""

        def unexpected(problem):
            raise AssertionError("the search program should not be solved")

        monkeypatch.setattr(games, "solve_milp", unexpected)
        game = StorageGame(small_community)
        assert game.most_violated(np.zeros(3), 0.0, set(CoalitionKey.proper(3)), -np.inf) is None
        single = StorageGame(generate_community(1, 1, 4))
        assert single.most_violated(np.zeros(1), 0.0, set(), -np.inf) is None


class TestShapley:
    """Test cases for the Shapley value."""

    def test_two_players(self):
        """Test the equal split of a symmetric two-player game."""
        result = shapley(game_from_table([10.0, 10.0, 16.0], 2))
        assert result.allocation.x == pytest.approx([8.0, 8.0])

    def test_three_players(self):
        """Test a three-player game against the average over joining orders."""
        values = [1.0, 2.0, 2.5, 2.0, 2.5, 3.5, 4.0]
        game = game_from_table(values, 3)
        result = shapley(game)
        assert result.allocation.x == pytest.approx([2 / 3, 5 / 3, 5 / 3])
        assert result.allocation.x == pytest.approx(permutation_shapley(np.array([0.0] + values), 3))
        assert result.coalitions_queried == 7

    def test_random_against_permutations(self):
        """Test random games against the average over joining orders."""
        rng = np.random.default_rng(41)
        for n in (2, 3, 4, 5):
            game = random_game(rng, n)
            result = shapley(game)
            assert result.allocation.x == pytest.approx(permutation_shapley(game.table, n))
            assert result.allocation.total() == pytest.approx(game.table[-1])

    def test_dummy_player(self):
        """Test that a player adding only its own cost pays exactly that."""
        base = {1: 4.0, 2: 6.0, 3: 9.0}
        values = {CoalitionKey(mask): base[mask] for mask in base}
        values.update({CoalitionKey(mask | 4): base[mask] + 3.0 for mask in base})
        values[CoalitionKey(4)] = 3.0
        result = shapley(TabularGame(values, 3))
        assert result.allocation[2] == pytest.approx(3.0)

    def test_weights(self):
        """Test that the weights over all coalition sizes sum to one per player."""
        weights = shapley_weights(4)
        sizes = np.array([1, 3, 3, 1])
        assert float(weights @ sizes) == pytest.approx(1.0)

    def test_player_limit(self, monkeypatch):
        """Test that large games need force."""
        monkeypatch.setattr("community_storage.allocation.SHAPLEY_MAX_PLAYERS", 2)
        game = game_from_table([1.0, 2.0, 2.5, 2.0, 2.5, 3.5, 4.0], 3)
        with pytest.raises(AllocationError):
            shapley(game)
        assert shapley(game, force=True).allocation.total() == pytest.approx(4.0)


class TestProportional:
    """Test cases for proportional sharing of the capital cost."""

    def test_split(self):
        """Test capex shared in proportion to opex reductions."""
        shares = proportional_split([10.0, 20.0], [8.0, 14.0], 4.0)
        assert shares == pytest.approx([1.0, 3.0])
        assert np.array([8.0, 14.0]) + shares == pytest.approx([9.0, 17.0])

    def test_zero_reduction(self):
        """Test that zero total reduction needs the equal split option."""
        with pytest.raises(AllocationError):
            proportional_split([5.0, 5.0], [5.0, 5.0], 2.0)
        assert proportional_split([5.0, 5.0], [5.0, 5.0], 2.0, equal_split=True) == pytest.approx([1.0, 1.0])

    def test_negative_total_reduction(self):
        """Test that a total cost increase has no proportional split, even with the equal split option."""
        with pytest.raises(AllocationError):
            proportional_split([10.0, 5.0], [8.0, 9.0], 3.0)
        with pytest.raises(AllocationError):
            proportional_split([10.0, 5.0], [8.0, 9.0], 3.0, equal_split=True)

    def test_witness(self, witness_files):
        """Test that proportional sharing overcharges a coalition the nucleolus satisfies."""
        model = load_community(*witness_files)
        result = proportional(model)
        assert result.allocation.x == pytest.approx([1.5, 1.5, 4.5], abs=1e-6)
        assert result.dsat == pytest.approx(0.5, abs=1e-6)
        assert not result.satisfied
        assert result.to_dict()["satisfied"] == "N"
        assert result.grand_value == pytest.approx(7.5, abs=1e-7)


class TestMeasures:
    """Test cases for excess, dissatisfaction and core membership."""

    def test_excess(self, symmetric_game):
        """Test excess of a pair and of a singleton at its stand-alone cost."""
        assert excess([6.0, 6.0, 6.0], CoalitionKey(0b011), symmetric_game) == pytest.approx(-2.0)
        assert excess([10.0, 4.0, 4.0], CoalitionKey(1), symmetric_game) == pytest.approx(0.0)

    def test_overcharge(self, symmetric_game):
        """Test that overcharging a player beyond its stand-alone cost shows in dissatisfaction."""
        assert dsat(symmetric_game, [11.0, 3.5, 3.5]) >= 1.0
        assert dsat(symmetric_game, Allocation([6.0, 6.0, 6.0])) == pytest.approx(-2.0)

    def test_in_core(self, symmetric_game):
        """Test core membership including efficiency."""
        assert in_core(symmetric_game, [6.0, 6.0, 6.0])
        assert not in_core(symmetric_game, [6.0, 6.0, 5.0])
        assert not in_core(symmetric_game, [12.0, 3.0, 3.0])

    def test_enumeration_limit(self, monkeypatch, symmetric_game):
        """Test that enumeration is refused for large games."""
        monkeypatch.setattr("community_storage.allocation.DSAT_ENUMERATION_MAX_PLAYERS", 2)
        with pytest.raises(AllocationError):
            dsat_by_enumeration(symmetric_game, [6.0, 6.0, 6.0])


@pytest.mark.slow
class TestLargeCommunities:
    """Acceptance runs on larger synthetic communities."""

    def test_query_sparsity(self, community_ten):
        """Test that the nucleolus of ten buildings evaluates a small share of the coalitions."""
        cache = CharacteristicCache()
        result = nucleolus(StorageGame(community_ten, cache))
        assert result.coalitions_queried <= 205
        assert result.allocation.total() == pytest.approx(result.grand_value, abs=1e-6)
        assert shapley(StorageGame(community_ten, CharacteristicCache())).coalitions_queried == 1023

    def test_five_buildings_against_oracle(self, community_five):
        """Test the nucleolus of five buildings against full enumeration."""
        game = StorageGame(community_five)
        result = nucleolus(game)
        assert result.allocation.x == pytest.approx(nucleolus_oracle(storage_table(game), 5), abs=1e-5)
        assert result.dsat <= 1e-6


class TestRandomGameSuite:
    """The nucleolus of random subadditive tabular games against sequential full-enumeration LPs."""

    @pytest.mark.parametrize("n_players", [3, 4, 5, 6])
    def test_random_games(self, n_players):
        """Test twenty-five random games of each size."""
        rng = np.random.default_rng(1000 + n_players)
        for _ in range(25):
            game = random_game(rng, n_players)
            result = nucleolus(game)
            assert result.allocation.x == pytest.approx(nucleolus_oracle(game.table, n_players), abs=1e-6)
            assert result.allocation.total() == pytest.approx(game.table[-1], abs=1e-6)
            _allocation, level = least_core(game)
            if level <= 0.0:
                assert result.dsat <= 1e-6

    @pytest.mark.parametrize("name", ["symmetric_game", "asymmetric_game"])
    def test_fixture_games(self, name, request):
        """Test the two fixture games."""
        game = request.getfixturevalue(name)
        result = nucleolus(game)
        assert result.allocation.x == pytest.approx(nucleolus_oracle(game.table, game.n_players), abs=1e-6)
        _allocation, level = least_core(game)
        if level <= 0.0:
            assert result.dsat <= 1e-6


class TestPermutationEquivariance:
    """Relabelling the players permutes the allocations the same way."""

    def test_tabular_games(self):
        """Test the nucleolus and the Shapley value of relabelled random games."""
        rng = np.random.default_rng(31)
        for n in (3, 4, 5):
            game = random_game(rng, n)
            order = rng.permutation(n)
            moved = relabelled(game, order)
            assert nucleolus(moved).allocation.x == pytest.approx(nucleolus(game).allocation.x[order], abs=1e-6)
            assert shapley(moved).allocation.x == pytest.approx(shapley(game).allocation.x[order], abs=1e-9)

    def test_storage_game(self, small_community):
        """Test the nucleolus of a community whose buildings are listed in another order."""
        order = [2, 0, 1]
        moved = dataclasses.replace(
            small_community, buildings=tuple(small_community.buildings[index] for index in order)
        )
        original = nucleolus(StorageGame(small_community)).allocation.x
        assert nucleolus(StorageGame(moved)).allocation.x == pytest.approx(original[order], abs=1e-5)


@pytest.mark.slow
class TestViolationSearchSuite:
    """The binary violation search of storage games against the enumerated largest excess."""

    def allocations(self, game, rng):
        """Three random splits of the grand value, the standalone-proportional one and the equal one."""
        n = game.n_players
        grand = game.value(CoalitionKey.grand(n))
        standalone = np.array([game.value(CoalitionKey.singleton(index)) for index in range(n)])
        yield from (grand * rng.dirichlet(np.ones(n)) for _ in range(3))
        yield grand * standalone / standalone.sum()
        yield np.full(n, grand / n)

    @pytest.mark.parametrize("index, n_buildings", list(enumerate([3, 4, 5, 6, 7, 8, 3, 4, 5, 6])))
    def test_search_matches_enumeration(self, index, n_buildings):
        """Test five allocations on each of ten communities of up to eight buildings."""
        game = StorageGame(generate_community(n_buildings, 1, 4, seed=200 + index))
        rng = np.random.default_rng(index)
        for x in self.allocations(game, rng):
            expected = dsat_by_enumeration(game, x)
            found = most_violated_coalition(game, x, 0.0, (), -np.inf)
            assert found is not None
            assert found[1] == pytest.approx(expected, abs=1e-5)
            assert excess(x, found[0], game) == pytest.approx(expected, abs=1e-5)
            if expected > 1e-4:
                assert most_violated_coalition(game, x, 0.0) is not None
            elif expected < -1e-4:
                assert most_violated_coalition(game, x, 0.0) is None


@pytest.mark.slow
class TestStorageNucleolusSuite:
    """The nucleolus of storage games with several scenarios against full enumeration."""

    @pytest.mark.parametrize("index", range(12))
    def test_against_oracle(self, index):
        """Test communities of four and five buildings with one to three scenarios."""
        n_buildings = 4 + index % 2
        model = generate_community(n_buildings, 1 + (index // 2) % 3, 6, seed=100 + index)
        game = StorageGame(model)
        result = nucleolus(game)
        expected = nucleolus_oracle(storage_table(game), n_buildings)
        assert result.allocation.x == pytest.approx(expected, abs=1e-4)
        assert result.allocation.total() == pytest.approx(result.grand_value, abs=1e-6)
