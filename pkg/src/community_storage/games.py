"""Cooperative cost games consumed by the allocation methods.

A game exposes its player count, the characteristic function ``value`` with
query counting, and ``most_violated``: the proper coalition maximizing
``x(S) - z - v(S)`` outside an exclusion set. :class:`TabularGame` holds an
explicit table and searches by enumeration; :class:`StorageGame` prices
coalitions with the sizing program and searches with a binary program.
"""

import json
import logging
from collections.abc import Iterable
from collections.abc import Mapping
from pathlib import Path
from typing import Protocol

import numpy as np

from community_storage.app_settings import MILP_AGREEMENT_TOLERANCE
from community_storage.coalition_value import CharacteristicCache
from community_storage.coalition_value import CoalitionOutcome
from community_storage.coalition_value import build_violation_problem
from community_storage.coalition_value import evaluate_coalition
from community_storage.coalition_value import evaluate_many
from community_storage.exceptions import AllocationError
from community_storage.exceptions import CoalitionError
from community_storage.exceptions import SolverError
from community_storage.helpers import grand_mask
from community_storage.helpers import membership_matrix
from community_storage.model import CoalitionKey
from community_storage.model import CommunityModel
from community_storage.solver import solve_milp


logger = logging.getLogger("community_storage")


class CostGame(Protocol):
    """Interface shared by the games the allocation methods accept."""

    n_players: int
    labels: tuple[str, ...]
    fingerprint: str | None

    @property
    def query_count(self) -> int: ...

    def value(self, coalition: CoalitionKey) -> float: ...

    def values(self, coalitions: Iterable[CoalitionKey]) -> dict[CoalitionKey, float]: ...

    def most_violated(
        self, x, z: float, exclude: Iterable[CoalitionKey], threshold: float
    ) -> tuple[CoalitionKey, float] | None: ...


class TabularGame:
    """A game given by an explicit value for every nonempty coalition.

    Distinct coalitions read through :meth:`value` are counted, mirroring the
    cache of the storage game. The violation search scans the table directly
    and does not count.
    """

    fingerprint = None

    def __init__(self, values: Mapping, n_players: int, labels: Iterable[str] | None = None):
        if n_players < 1:
            raise CoalitionError("A game needs at least one player")
        self.n_players = n_players
        self.labels = tuple(labels) if labels is not None else tuple(str(index + 1) for index in range(n_players))
        if len(self.labels) != n_players:
            raise CoalitionError(f"{len(self.labels)} labels for {n_players} players")
        table = np.full(1 << n_players, np.nan)
        table[0] = 0.0
        for key, value in values.items():
            mask = key.mask if isinstance(key, CoalitionKey) else int(key)
            if not 0 < mask <= grand_mask(n_players):
                raise CoalitionError(f"Coalition mask {mask} outside a {n_players}-player game")
            table[mask] = float(value)
        missing = np.flatnonzero(np.isnan(table))
        if missing.size:
            raise CoalitionError(f"No value for coalition {CoalitionKey(int(missing[0])).label(self.labels)}")
        table.setflags(write=False)
        self._table = table
        self._queried: set[int] = set()

    @classmethod
    def from_mapping(cls, players: Iterable[str], values: Mapping[str, float]) -> "TabularGame":
        """Build a game from values keyed by comma-separated player labels, e.g. ``{"1,2": 14}``."""
        players = tuple(str(player) for player in players)
        index = {player: position for position, player in enumerate(players)}
        table = {}
        for key, value in values.items():
            members = [part.strip() for part in str(key).split(",") if part.strip()]
            try:
                table[CoalitionKey.from_members(index[member] for member in members)] = value
            except KeyError as err:
                raise CoalitionError(f"Unknown player {err.args[0]!r} in coalition {key!r}") from err
        return cls(table, len(players), players)

    @classmethod
    def from_json(cls, path) -> "TabularGame":
        """Load ``{"players": [...], "values": {"1": 10, "1,2": 14, ...}}``."""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise CoalitionError(f"Game file {path} could not be read: {err}") from err
        try:
            return cls.from_mapping(data["players"], data["values"])
        except KeyError as err:
            raise CoalitionError(f"Game file {path} lacks the {err.args[0]!r} key") from err

    @property
    def query_count(self) -> int:
        return len(self._queried)

    @property
    def table(self) -> np.ndarray:
        """Read-only values indexed by coalition mask, ``v(empty) = 0``; reading it is not counted."""
        return self._table

    def value(self, coalition: CoalitionKey) -> float:
        coalition = coalition.validate(self.n_players)
        self._queried.add(coalition.mask)
        return float(self._table[coalition.mask])

    def values(self, coalitions: Iterable[CoalitionKey]) -> dict[CoalitionKey, float]:
        return {coalition: self.value(coalition) for coalition in coalitions}

    def most_violated(self, x, z: float, exclude: Iterable[CoalitionKey], threshold: float):
        masks = np.arange(1, grand_mask(self.n_players))
        excluded = np.array(sorted({key.mask for key in exclude}), dtype=np.int64)
        masks = masks[~np.isin(masks, excluded)]
        if masks.size == 0:
            return None
        excess = membership_matrix(self.n_players, masks) @ np.asarray(x, dtype=float) - self._table[masks] - z
        best = int(np.argmax(excess))
        if excess[best] <= threshold:
            return None
        return CoalitionKey(int(masks[best])), float(excess[best])


class StorageGame:
    """The cost game of a community: ``v(S)`` is the optimal cost of coalition ``S``."""

    def __init__(self, model: CommunityModel, cache: CharacteristicCache | None = None, threads: int = 1):
        self.model = model
        self.cache = cache if cache is not None else CharacteristicCache()
        self.threads = max(1, int(threads))
        self.n_players = model.n_buildings
        self.labels = model.building_ids
        self.fingerprint = model.fingerprint

    @property
    def query_count(self) -> int:
        return self.cache.query_count

    def outcome(self, coalition: CoalitionKey) -> CoalitionOutcome:
        return evaluate_coalition(self.model, coalition, self.cache)

    def value(self, coalition: CoalitionKey) -> float:
        return self.outcome(coalition).value

    def values(self, coalitions: Iterable[CoalitionKey]) -> dict[CoalitionKey, float]:
        outcomes = evaluate_many(self.model, coalitions, self.cache, self.threads)
        return {coalition: outcome.value for coalition, outcome in outcomes.items()}

    def most_violated(self, x, z: float, exclude: Iterable[CoalitionKey], threshold: float):
        """Solve the violation search program and confirm its answer with the coalition's own LP.

        Returns ``None`` when every proper coalition is excluded or the largest
        violation is at most ``threshold``.

        Raises:
            SolverError: The search program is not optimal although proper coalitions remain.
            AllocationError: The program's violation and the re-evaluated one differ by more than
                ``MILP_AGREEMENT_TOLERANCE``.
        """
        x = np.asarray(x, dtype=float)
        exclude = set(exclude)
        proper = sum(1 for key in exclude if key.is_proper(self.n_players))
        if proper >= (1 << self.n_players) - 2:
            return None
        problem, _layout, selectors = build_violation_problem(self.model, x, z, exclude)
        solution = solve_milp(problem)
        if not solution.is_optimal:
            logger.error(
                "Violation search program not optimal: %s",
                {"status": solution.status.value, "excluded": proper, "nodes": solution.nodes},
            )
            raise SolverError(f"Violation search program is {solution.status.value} with {proper} coalitions excluded")
        coalition = CoalitionKey.from_members(np.flatnonzero(np.round(solution.primal[selectors]) > 0.5).tolist())
        searched = -solution.objective_value - z
        if searched <= threshold:
            return None
        value = self.value(coalition)
        confirmed = float(x[list(coalition.members())].sum()) - z - value
        if abs(confirmed - searched) > MILP_AGREEMENT_TOLERANCE:
            logger.error(
                "Violation search disagrees with coalition program: %s",
                {"coalition": coalition.label(self.labels), "search": searched, "program": confirmed},
            )
            raise AllocationError(
                f"Violation {searched:.9g} of coalition {coalition.label(self.labels)} does not match "
                f"its re-evaluated value {confirmed:.9g}"
            )
        logger.debug(
            "Most violated coalition: %s",
            {"coalition": coalition.label(self.labels), "excess": confirmed, "nodes": solution.nodes},
        )
        return coalition, confirmed
