"""Community, tariff and storage data, its validation, and file round-trips.

A community is read from a long-format profile CSV
(``building_id, scenario_id, period, demand_kw, renewable_kw``) plus a TOML
config with ``[scenarios]``, ``[tariff]``, ``[storage]`` and ``[options]``
sections. Scenario probabilities come from the config (an inline list or a
CSV path relative to the config file) or, failing that, from a
``probabilities.csv`` next to the profiles.
"""

import dataclasses
import functools
import hashlib
import io
import json
import logging
import math
import tomllib
from collections.abc import Iterable
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from community_storage.choices import SharingMode
from community_storage.exceptions import CoalitionError
from community_storage.exceptions import ModelValidationError
from community_storage.helpers import atomic_write_text
from community_storage.helpers import grand_mask
from community_storage.helpers import iter_proper_masks
from community_storage.helpers import mask_members


logger = logging.getLogger("community_storage")

PROFILE_COLUMNS = ("building_id", "scenario_id", "period", "demand_kw", "renewable_kw")
PROBABILITY_COLUMNS = ("scenario_id", "probability")
PROBABILITY_SUM_TOLERANCE = 1e-9
HOURS_PER_DAY = 24.0


def default_config_path() -> Path:
    """Return the path of the packaged default community config."""
    return Path(__file__).parent / "data" / "default_config.toml"


def _frozen_array(values, name: str, ndim: int) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != ndim:
        raise ModelValidationError(name, f"expected a {ndim}-dimensional array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ModelValidationError(name, "values must be finite")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class BuildingProfile:
    """Demand and renewable generation of one building, indexed ``[scenario, period]`` in kW."""

    id: str
    demand: np.ndarray
    renewable: np.ndarray

    def __post_init__(self):
        demand = _frozen_array(self.demand, f"profiles.demand_kw[{self.id}]", 2)
        renewable = _frozen_array(self.renewable, f"profiles.renewable_kw[{self.id}]", 2)
        if demand.shape != renewable.shape:
            raise ModelValidationError(f"profiles[{self.id}]", "demand and renewable shapes differ")
        if (demand < 0).any():
            raise ModelValidationError(f"profiles.demand_kw[{self.id}]", "demand must be non-negative")
        if (renewable < 0).any():
            raise ModelValidationError(f"profiles.renewable_kw[{self.id}]", "renewable generation must be non-negative")
        object.__setattr__(self, "demand", demand)
        object.__setattr__(self, "renewable", renewable)

    def __eq__(self, other):
        if not isinstance(other, BuildingProfile):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.demand, other.demand)
            and np.array_equal(self.renewable, other.renewable)
        )

    __hash__ = None

    @property
    def net_load(self) -> np.ndarray:
        """Demand minus renewable generation; positive values must be bought, negative ones sold."""
        return self.demand - self.renewable


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Representative days with their probabilities.

    Each day is split into ``period_count`` periods of ``period_length`` hours.
    """

    probabilities: np.ndarray
    period_count: int
    period_length: float = 1.0
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        probabilities = _frozen_array(self.probabilities, "scenarios.probabilities", 1)
        if probabilities.size == 0:
            raise ModelValidationError("scenarios.probabilities", "at least one scenario is required")
        if (probabilities < 0).any():
            raise ModelValidationError("scenarios.probabilities", "probabilities must be non-negative")
        total = float(probabilities.sum())
        if abs(total - 1.0) > PROBABILITY_SUM_TOLERANCE:
            raise ModelValidationError("scenarios.probabilities", f"probabilities sum to {total!r}, expected 1")
        if int(self.period_count) < 1:
            raise ModelValidationError("scenarios.period_count", "at least one period is required")
        if not self.period_length > 0:
            raise ModelValidationError("scenarios.period_length", "period length must be positive")
        if self.ids is None:
            ids = tuple(f"s{index}" for index in range(probabilities.size))
        else:
            ids = tuple(str(identifier) for identifier in self.ids)
        if len(ids) != probabilities.size or len(set(ids)) != len(ids):
            raise ModelValidationError("scenarios.ids", "scenario ids must be unique, one per probability")
        object.__setattr__(self, "probabilities", probabilities)
        object.__setattr__(self, "period_count", int(self.period_count))
        object.__setattr__(self, "period_length", float(self.period_length))
        object.__setattr__(self, "ids", ids)

    def __eq__(self, other):
        if not isinstance(other, ScenarioSet):
            return NotImplemented
        return (
            np.array_equal(self.probabilities, other.probabilities)
            and self.period_count == other.period_count
            and self.period_length == other.period_length
            and self.ids == other.ids
        )

    __hash__ = None

    @property
    def count(self) -> int:
        return self.probabilities.size


@dataclass(frozen=True, eq=False)
class Tariff:
    """Time-of-use purchase and sell prices per period plus a daily demand charge on the peak grid power."""

    purchase: np.ndarray
    sell: np.ndarray
    demand_charge: float = 0.0

    def __post_init__(self):
        purchase = _frozen_array(self.purchase, "tariff.purchase", 1)
        sell = _frozen_array(np.broadcast_to(np.asarray(self.sell, dtype=float), purchase.shape), "tariff.sell", 1)
        if (sell < 0).any():
            raise ModelValidationError("tariff.sell", "sell prices must be non-negative")
        crossing = np.flatnonzero(purchase <= sell)
        if crossing.size:
            raise ModelValidationError(
                "tariff.sell",
                f"purchase price must exceed the sell price in every period; fails at period {crossing[0]}",
            )
        if not (math.isfinite(self.demand_charge) and self.demand_charge >= 0):
            raise ModelValidationError("tariff.demand_charge", "demand charge must be finite and non-negative")
        object.__setattr__(self, "purchase", purchase)
        object.__setattr__(self, "sell", sell)
        object.__setattr__(self, "demand_charge", float(self.demand_charge))

    def __eq__(self, other):
        if not isinstance(other, Tariff):
            return NotImplemented
        return (
            np.array_equal(self.purchase, other.purchase)
            and np.array_equal(self.sell, other.sell)
            and self.demand_charge == other.demand_charge
        )

    __hash__ = None


@dataclass(frozen=True)
class StorageParams:
    """Daily capacity prices, efficiencies and power limits of the storage and grid connection."""

    k_e: float
    k_p: float
    eta_ch: float = 0.9
    eta_dis: float = 0.9
    p_ch_max: float = 1000.0
    p_dis_max: float = 1000.0
    p_g_max: float = 1000.0

    def __post_init__(self):
        for name in ("k_e", "k_p"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ModelValidationError(f"storage.{name}", "capacity price must be finite and non-negative")
        for name in ("eta_ch", "eta_dis"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ModelValidationError(f"storage.{name}", "efficiency must lie in (0, 1]")
        for name in ("p_ch_max", "p_dis_max", "p_g_max"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ModelValidationError(f"storage.{name}", "power limit must be finite and positive")
        for name in self.__dataclass_fields__:
            object.__setattr__(self, name, float(getattr(self, name)))


def amortized_capacity_prices(
    price_e: float, price_p: float, rate: float, lifetime: float, cycles_per_year: float
) -> tuple[float, float]:
    """Convert capital prices into per-cycle capacity prices with the capital recovery factor.

    ``k = price * r (1 + r)^L / ((1 + r)^L - 1) / cycles_per_year``; a zero rate
    falls back to straight-line recovery ``price / L / cycles_per_year``.

    Raises:
        ModelValidationError: An input is not finite, a price or the rate is
            negative, or the lifetime or cycles per year is below one.
    """
    inputs = {
        "storage.price_e": price_e,
        "storage.price_p": price_p,
        "storage.rate": rate,
        "storage.lifetime": lifetime,
        "storage.cycles_per_year": cycles_per_year,
    }
    for field, value in inputs.items():
        if not math.isfinite(value):
            raise ModelValidationError(field, f"must be finite, got {value}")
    for field in ("storage.price_e", "storage.price_p", "storage.rate"):
        if inputs[field] < 0:
            raise ModelValidationError(field, "must be non-negative")
    if lifetime < 1:
        raise ModelValidationError("storage.lifetime", "lifetime must be at least one year")
    if cycles_per_year < 1:
        raise ModelValidationError("storage.cycles_per_year", "at least one cycle per year is required")
    if rate == 0:
        factor = 1.0 / lifetime
    else:
        growth = (1.0 + rate) ** lifetime
        factor = rate * growth / (growth - 1.0)
    return price_e * factor / cycles_per_year, price_p * factor / cycles_per_year


def tariff_price_at(tariff: Tariff, period: int) -> float:
    """Return the purchase price of a period."""
    if not 0 <= period < tariff.purchase.size:
        raise ModelValidationError("tariff.purchase", f"period {period} outside 0..{tariff.purchase.size - 1}")
    return float(tariff.purchase[period])


def band_prices(bands: Iterable[dict], period_count: int, period_length: float) -> np.ndarray:
    """Expand hour bands ``{start, end, price}`` into one price per period.

    A period belongs to the first band containing its start hour. Bands with
    ``start > end`` wrap around midnight.
    """
    bands = list(bands)
    prices = np.empty(period_count)
    for period in range(period_count):
        hour = (period * period_length) % HOURS_PER_DAY
        for band in bands:
            start, end = float(band["start"]), float(band["end"])
            inside = start <= hour < end if start <= end else (hour >= start or hour < end)
            if inside:
                prices[period] = float(band["price"])
                break
        else:
            raise ModelValidationError("tariff.bands", f"no band covers hour {hour:g} (period {period})")
    return prices


@dataclass(frozen=True, order=True)
class CoalitionKey:
    """A coalition as a bitmask over building indices; bit ``i`` set means building ``i`` is a member."""

    mask: int

    def __post_init__(self):
        if int(self.mask) < 0:
            raise CoalitionError(f"Coalition mask must be non-negative, got {self.mask}")
        object.__setattr__(self, "mask", int(self.mask))

    @classmethod
    def from_members(cls, members: Iterable[int]) -> "CoalitionKey":
        mask = 0
        for member in members:
            if int(member) < 0:
                raise CoalitionError(f"Building index must be non-negative, got {member}")
            mask |= 1 << int(member)
        return cls(mask)

    @classmethod
    def grand(cls, n_buildings: int) -> "CoalitionKey":
        return cls(grand_mask(n_buildings))

    @classmethod
    def singleton(cls, index: int) -> "CoalitionKey":
        return cls.from_members([index])

    @classmethod
    def proper(cls, n_buildings: int) -> Iterator["CoalitionKey"]:
        """Yield every nonempty proper sub-coalition in ascending mask order."""
        for mask in iter_proper_masks(n_buildings):
            yield cls(mask)

    def members(self) -> tuple[int, ...]:
        return mask_members(self.mask)

    @property
    def size(self) -> int:
        return self.mask.bit_count()

    def __contains__(self, index: int) -> bool:
        return bool(self.mask >> index & 1)

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[int]:
        return iter(self.members())

    def union(self, other: "CoalitionKey") -> "CoalitionKey":
        return CoalitionKey(self.mask | other.mask)

    def complement(self, n_buildings: int) -> "CoalitionKey":
        return CoalitionKey(grand_mask(n_buildings) & ~self.mask)

    def is_proper(self, n_buildings: int) -> bool:
        return 0 < self.mask < grand_mask(n_buildings)

    def validate(self, n_buildings: int) -> "CoalitionKey":
        """Return ``self`` if it is a nonempty subset of an ``n_buildings`` community."""
        if self.mask == 0:
            raise CoalitionError("Coalition must contain at least one building")
        if self.mask >> n_buildings:
            raise CoalitionError(f"Coalition {self.mask:#b} names buildings outside 0..{n_buildings - 1}")
        return self

    def label(self, building_ids: tuple[str, ...] | None = None) -> str:
        if building_ids is None:
            return ",".join(str(member + 1) for member in self.members())
        return ",".join(building_ids[member] for member in self.members())


@dataclass(frozen=True, eq=False)
class CommunityModel:
    """Everything needed to price any coalition of the community.

    Arrays are immutable after construction, so a model can be shared freely
    between threads. ``fingerprint`` identifies the model's content and keys
    the characteristic-function cache.
    """

    buildings: tuple[BuildingProfile, ...]
    scenarios: ScenarioSet
    tariff: Tariff
    storage: StorageParams
    sharing_mode: SharingMode = SharingMode.PER_BUILDING
    periodic_soc: bool = False
    demand_charge_import_only: bool = False

    def __post_init__(self):
        buildings = tuple(self.buildings)
        if not buildings:
            raise ModelValidationError("profiles", "the community needs at least one building")
        ids = [building.id for building in buildings]
        if len(set(ids)) != len(ids):
            raise ModelValidationError("profiles.building_id", "building ids must be unique")
        expected = (self.scenarios.count, self.scenarios.period_count)
        for building in buildings:
            if building.demand.shape != expected:
                raise ModelValidationError(
                    f"profiles[{building.id}]",
                    f"profile shape {building.demand.shape} does not match {expected} (scenarios, periods)",
                )
        if self.tariff.purchase.size != self.scenarios.period_count:
            raise ModelValidationError(
                "tariff.purchase", f"{self.tariff.purchase.size} prices for {self.scenarios.period_count} periods"
            )
        try:
            sharing_mode = SharingMode(self.sharing_mode)
        except ValueError as err:
            raise ModelValidationError("options.sharing_mode", f"unknown sharing mode {self.sharing_mode!r}") from err
        object.__setattr__(self, "buildings", buildings)
        object.__setattr__(self, "sharing_mode", sharing_mode)
        object.__setattr__(self, "periodic_soc", bool(self.periodic_soc))
        object.__setattr__(self, "demand_charge_import_only", bool(self.demand_charge_import_only))

    def __eq__(self, other):
        if not isinstance(other, CommunityModel):
            return NotImplemented
        return (
            self.buildings == other.buildings
            and self.scenarios == other.scenarios
            and self.tariff == other.tariff
            and self.storage == other.storage
            and self.sharing_mode is other.sharing_mode
            and self.periodic_soc == other.periodic_soc
            and self.demand_charge_import_only == other.demand_charge_import_only
        )

    __hash__ = None

    @property
    def n_buildings(self) -> int:
        return len(self.buildings)

    @property
    def building_ids(self) -> tuple[str, ...]:
        return tuple(building.id for building in self.buildings)

    @functools.cached_property
    def fingerprint(self) -> str:
        """SHA-256 over every array and parameter of the model, including the sharing mode."""
        digest = hashlib.sha256()

        def feed(value):
            if isinstance(value, np.ndarray):
                digest.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
            else:
                digest.update(repr(value).encode())
            digest.update(b"|")

        for building in self.buildings:
            feed(building.id)
            feed(building.demand)
            feed(building.renewable)
        feed(self.scenarios.probabilities)
        feed((self.scenarios.period_count, self.scenarios.period_length, self.scenarios.ids))
        feed(self.tariff.purchase)
        feed(self.tariff.sell)
        feed(self.tariff.demand_charge)
        feed(dataclasses.astuple(self.storage))
        feed((self.sharing_mode.value, self.periodic_soc, self.demand_charge_import_only))
        return digest.hexdigest()

    @functools.cached_property
    def net_load(self) -> np.ndarray:
        """Demand minus renewable generation, indexed ``[building, scenario, period]``."""
        load = np.stack([building.net_load for building in self.buildings])
        load.setflags(write=False)
        return load

    def replace(self, **changes) -> "CommunityModel":
        return dataclasses.replace(self, **changes)

    def with_sharing_mode(self, mode) -> "CommunityModel":
        return self.replace(sharing_mode=SharingMode(mode))

    def building_index(self, building_id: str) -> int:
        try:
            return self.building_ids.index(building_id)
        except ValueError as err:
            raise CoalitionError(f"Unknown building id {building_id!r}") from err

    def grand_coalition(self) -> CoalitionKey:
        return CoalitionKey.grand(self.n_buildings)

    def validate_coalition(self, coalition: CoalitionKey) -> CoalitionKey:
        return coalition.validate(self.n_buildings)

    def parse_coalition(self, spec: str) -> CoalitionKey:
        """Parse ``"grand"`` or comma-separated building ids into a coalition."""
        spec = spec.strip()
        if spec.lower() == "grand":
            return self.grand_coalition()
        members = [part.strip() for part in spec.split(",") if part.strip()]
        if not members:
            raise CoalitionError("Coalition must contain at least one building")
        return CoalitionKey.from_members(self.building_index(member) for member in members)


def scale_profiles(model: CommunityModel, factor: float) -> CommunityModel:
    """Multiply every demand and renewable profile by ``factor``."""
    if not factor > 0:
        raise ModelValidationError("profiles", "scaling factor must be positive")
    buildings = tuple(
        BuildingProfile(building.id, building.demand * factor, building.renewable * factor)
        for building in model.buildings
    )
    return model.replace(buildings=buildings)


def _read_config(path: Path) -> dict:
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError as err:
        raise ModelValidationError("config", f"config file {path} does not exist") from err
    except tomllib.TOMLDecodeError as err:
        raise ModelValidationError("config", f"{path} is not valid TOML: {err}") from err


def _read_csv(path: Path, columns: tuple[str, ...], field: str, dtypes: dict) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=dtypes, float_precision="round_trip")
    except FileNotFoundError as err:
        raise ModelValidationError(field, f"file {path} does not exist") from err
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as err:
        raise ModelValidationError(field, f"{path} could not be parsed: {err}") from err
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise ModelValidationError(f"{field}.{missing[0]}", f"required column missing from {path}")
    if frame[list(columns)].isna().any().any():
        raise ModelValidationError(field, f"{path} has empty cells")
    return frame


def _probabilities(section: dict, config_dir: Path, profile_path: Path, profile_ids: list[str]):
    source = section.get("probabilities")
    if isinstance(source, list):
        if len(source) != len(profile_ids):
            raise ModelValidationError(
                "scenarios.probabilities", f"{len(source)} probabilities for {len(profile_ids)} scenarios"
            )
        return profile_ids, np.array(source, dtype=float)
    path = config_dir / source if source else profile_path.parent / "probabilities.csv"
    frame = _read_csv(path, PROBABILITY_COLUMNS, "probabilities", {"scenario_id": str})
    if frame["scenario_id"].duplicated().any():
        raise ModelValidationError("probabilities.scenario_id", "scenario ids must be unique")
    ids = frame["scenario_id"].tolist()
    unknown = sorted(set(profile_ids) - set(ids))
    if unknown:
        raise ModelValidationError("probabilities.scenario_id", f"no probability for scenario {unknown[0]!r}")
    return ids, frame["probability"].to_numpy(dtype=float)


def _pivot(group: pd.DataFrame, column: str, scenario_ids: list[str], period_count: int, building_id: str):
    try:
        table = group.pivot(index="scenario_id", columns="period", values=column)
    except ValueError as err:
        raise ModelValidationError("profiles", f"duplicate (scenario, period) rows for building {building_id}") from err
    table = table.reindex(index=scenario_ids, columns=range(period_count))
    if table.isna().any().any():
        raise ModelValidationError("profiles", f"building {building_id} lacks rows for some (scenario, period)")
    return table.to_numpy(dtype=float)


def _tariff_from_config(section: dict, period_count: int, period_length: float) -> Tariff:
    if "purchase" in section:
        if isinstance(section["purchase"], list) and len(section["purchase"]) != period_count:
            count = len(section["purchase"])
            raise ModelValidationError("tariff.purchase", f"{count} prices for {period_count} periods")
        purchase = np.broadcast_to(np.asarray(section["purchase"], dtype=float), period_count)
    elif "bands" in section:
        purchase = band_prices(section["bands"], period_count, period_length)
    else:
        raise ModelValidationError("tariff.purchase", "either purchase prices or hour bands are required")
    sell = section.get("sell", 0.0)
    if isinstance(sell, list) and len(sell) != period_count:
        raise ModelValidationError("tariff.sell", f"{len(sell)} prices for {period_count} periods")
    return Tariff(purchase=purchase, sell=sell, demand_charge=float(section.get("demand_charge", 0.0)))


def _storage_from_config(section: dict) -> StorageParams:
    if "k_e" in section or "k_p" in section:
        try:
            k_e, k_p = float(section["k_e"]), float(section["k_p"])
        except KeyError as err:
            raise ModelValidationError(f"storage.{err.args[0]}", "k_e and k_p must be given together") from err
    else:
        try:
            k_e, k_p = amortized_capacity_prices(
                float(section["price_e"]),
                float(section["price_p"]),
                float(section["rate"]),
                float(section["lifetime"]),
                float(section.get("cycles_per_year", 365)),
            )
        except KeyError as err:
            raise ModelValidationError(f"storage.{err.args[0]}", "required storage parameter missing") from err
    p_g_max = float(section.get("p_g_max", 1000.0))
    return StorageParams(
        k_e=k_e,
        k_p=k_p,
        eta_ch=float(section.get("eta_ch", 0.9)),
        eta_dis=float(section.get("eta_dis", 0.9)),
        p_ch_max=float(section.get("p_ch_max", p_g_max)),
        p_dis_max=float(section.get("p_dis_max", p_g_max)),
        p_g_max=p_g_max,
    )


def economics_from_config(config_path=None, *, period_count: int, period_length: float | None = None):
    """Read the tariff and storage parameters of a config for a day of ``period_count`` periods.

    Returns:
        ``(tariff, storage, options)`` where ``options`` is the config's ``[options]`` table.
    """
    config = _read_config(Path(config_path) if config_path else default_config_path())
    if period_length is None:
        period_length = float(config.get("scenarios", {}).get("period_length", HOURS_PER_DAY / period_count))
    tariff = _tariff_from_config(config.get("tariff", {}), period_count, period_length)
    return tariff, _storage_from_config(config.get("storage", {})), dict(config.get("options", {}))


def load_community(profile_path, config_path=None) -> CommunityModel:
    """Load and validate a community from a profile CSV and a TOML config.

    Args:
        profile_path: Long-format CSV with columns ``building_id, scenario_id, period, demand_kw, renewable_kw``.
        config_path: TOML config; defaults to the packaged default config.

    Raises:
        ModelValidationError: Naming the first offending field.
    """
    profile_path = Path(profile_path)
    config_path = Path(config_path) if config_path else default_config_path()
    config = _read_config(config_path)
    frame = _read_csv(profile_path, PROFILE_COLUMNS, "profiles", {"building_id": str, "scenario_id": str})
    if not pd.api.types.is_integer_dtype(frame["period"]) or (frame["period"] < 0).any():
        raise ModelValidationError("profiles.period", "periods must be non-negative integers")
    period_count = int(frame["period"].max()) + 1
    profile_ids = list(dict.fromkeys(frame["scenario_id"]))

    section = config.get("scenarios", {})
    scenario_ids, probabilities = _probabilities(section, config_path.parent, profile_path, profile_ids)
    period_length = float(section.get("period_length", HOURS_PER_DAY / period_count))
    scenarios = ScenarioSet(probabilities, period_count, period_length, tuple(scenario_ids))

    buildings = tuple(
        BuildingProfile(
            building_id,
            _pivot(group, "demand_kw", scenario_ids, period_count, building_id),
            _pivot(group, "renewable_kw", scenario_ids, period_count, building_id),
        )
        for building_id, group in frame.groupby("building_id", sort=False)
    )
    options = config.get("options", {})
    model = CommunityModel(
        buildings=buildings,
        scenarios=scenarios,
        tariff=_tariff_from_config(config.get("tariff", {}), period_count, period_length),
        storage=_storage_from_config(config.get("storage", {})),
        sharing_mode=options.get("sharing_mode", SharingMode.PER_BUILDING.value),
        periodic_soc=options.get("periodic_soc", False),
        demand_charge_import_only=options.get("demand_charge_import_only", False),
    )
    logger.info(
        "Loaded community: %s",
        {
            "profiles": str(profile_path),
            "config": str(config_path),
            "buildings": model.n_buildings,
            "scenarios": scenarios.count,
            "periods": period_count,
        },
    )
    return model


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(item) for item in value) + "]"
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def community_config_text(model: CommunityModel, probabilities_file: str = "probabilities.csv") -> str:
    """Render the TOML config that reproduces ``model`` together with its profile and probability files."""
    storage = model.storage
    sections = {
        "scenarios": {"probabilities": probabilities_file, "period_length": model.scenarios.period_length},
        "tariff": {
            "purchase": model.tariff.purchase.tolist(),
            "sell": model.tariff.sell.tolist(),
            "demand_charge": model.tariff.demand_charge,
        },
        "storage": {name: getattr(storage, name) for name in storage.__dataclass_fields__},
        "options": {
            "sharing_mode": model.sharing_mode.value,
            "periodic_soc": model.periodic_soc,
            "demand_charge_import_only": model.demand_charge_import_only,
        },
    }
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_toml_value(value)}" for key, value in values.items())
        lines.append("")
    return "\n".join(lines)


def profiles_frame(model: CommunityModel) -> pd.DataFrame:
    """Long-format profile table of ``model`` in building, scenario, period order."""
    periods = np.arange(model.scenarios.period_count)
    records = []
    for building in model.buildings:
        for scenario, scenario_id in enumerate(model.scenarios.ids):
            records.append(
                pd.DataFrame(
                    {
                        "building_id": building.id,
                        "scenario_id": scenario_id,
                        "period": periods,
                        "demand_kw": building.demand[scenario],
                        "renewable_kw": building.renewable[scenario],
                    }
                )
            )
    return pd.concat(records, ignore_index=True)


def _frame_csv(frame: pd.DataFrame) -> str:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    return buffer.getvalue()


def dump_community(model: CommunityModel, directory) -> dict[str, Path]:
    """Write ``profiles.csv``, ``probabilities.csv`` and ``config.toml`` that load back into an equal model."""
    directory = Path(directory)
    probabilities = pd.DataFrame({"scenario_id": model.scenarios.ids, "probability": model.scenarios.probabilities})
    paths = {
        "profiles": atomic_write_text(directory / "profiles.csv", _frame_csv(profiles_frame(model))),
        "probabilities": atomic_write_text(directory / "probabilities.csv", _frame_csv(probabilities)),
        "config": atomic_write_text(directory / "config.toml", community_config_text(model)),
    }
    logger.info("Wrote community files: %s", {key: str(path) for key, path in paths.items()})
    return paths
