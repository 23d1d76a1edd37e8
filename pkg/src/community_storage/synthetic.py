"""Seeded synthetic communities of buildings with complementary load shapes.

Each building follows a daily archetype (office, hotel, school, hospital or
restaurant) given as piecewise-constant hourly shares of its peak load,
perturbed per scenario and per period by seeded noise. Rooftop solar follows a
bell curve centred on noon with a per-scenario clearness factor and is
consumed on site: it never exceeds the building's own load. Scenario
probabilities are drawn from a flat Dirichlet distribution.
"""

import logging
from pathlib import Path

import numpy as np

from community_storage.choices import SharingMode
from community_storage.exceptions import ModelValidationError
from community_storage.model import HOURS_PER_DAY
from community_storage.model import BuildingProfile
from community_storage.model import CommunityModel
from community_storage.model import ScenarioSet
from community_storage.model import dump_community
from community_storage.model import economics_from_config


logger = logging.getLogger("community_storage")

# Share of the building's peak load in each hour of the day.
ARCHETYPES = {
    "office": [0.3] * 7 + [0.6] + [1.0] * 10 + [0.5] + [0.3] * 5,
    "hotel": [0.5] * 6 + [0.7] * 3 + [0.4] * 8 + [0.8] * 2 + [1.0] * 4 + [0.6],
    "school": [0.2] * 7 + [0.9] + [1.0] * 7 + [0.6] * 2 + [0.2] * 7,
    "hospital": [0.7] * 7 + [0.9] * 4 + [1.0] * 6 + [0.9] * 4 + [0.8] * 3,
    "restaurant": [0.1] * 10 + [0.7] + [1.0] * 3 + [0.4] * 3 + [0.9] * 5 + [0.3] * 2,
}
# Scenarios in which schools are closed, as a fraction of all scenarios.
SCHOOL_CLOSED_SHARE = 2 / 7
SCHOOL_CLOSED_FACTOR = 0.3
PEAK_LOAD_RANGE = (20.0, 80.0)
SOLAR_SHARE_RANGE = (0.2, 0.6)
CLEARNESS_RANGE = (0.3, 1.0)
NOISE_SCALE = 0.05
SOLAR_NOON = 12.0
SOLAR_WIDTH = 3.5
DECIMALS = 3


def _hours(n_periods: int) -> np.ndarray:
    return np.arange(n_periods) * (HOURS_PER_DAY / n_periods)


def archetype_shape(archetype: str, n_periods: int) -> np.ndarray:
    """Hourly shares of ``archetype`` sampled at the start hour of each of ``n_periods`` periods."""
    try:
        hourly = np.array(ARCHETYPES[archetype])
    except KeyError as err:
        raise ModelValidationError("archetype", f"unknown building archetype {archetype!r}") from err
    return hourly[np.floor(_hours(n_periods)).astype(int) % hourly.size]


def solar_shape(n_periods: int) -> np.ndarray:
    """Clear-sky solar output per period as a share of installed capacity."""
    hours = _hours(n_periods)
    return np.where((hours >= 6) & (hours <= 18), np.exp(-(((hours - SOLAR_NOON) / SOLAR_WIDTH) ** 2)), 0.0)


def _building(rng: np.random.Generator, building_id: str, archetype: str, n_scenarios: int, n_periods: int):
    peak = rng.uniform(*PEAK_LOAD_RANGE)
    shape = archetype_shape(archetype, n_periods)
    scenario_factor = rng.uniform(0.8, 1.2, size=n_scenarios)
    if archetype == "school":
        closed = rng.random(n_scenarios) < SCHOOL_CLOSED_SHARE
        scenario_factor = np.where(closed, SCHOOL_CLOSED_FACTOR, scenario_factor)
    noise = np.clip(rng.normal(1.0, NOISE_SCALE, size=(n_scenarios, n_periods)), 0.0, None)
    demand = peak * shape[None, :] * scenario_factor[:, None] * noise

    capacity = rng.uniform(*SOLAR_SHARE_RANGE) * peak
    clearness = rng.uniform(*CLEARNESS_RANGE, size=n_scenarios)
    renewable = np.minimum(capacity * clearness[:, None] * solar_shape(n_periods)[None, :], demand)
    return BuildingProfile(building_id, np.round(demand, DECIMALS), np.round(renewable, DECIMALS))


def generate_community(
    n_buildings: int,
    n_scenarios: int,
    n_periods: int = 24,
    seed: int = 0,
    *,
    config_path=None,
    sharing_mode: SharingMode = SharingMode.PER_BUILDING,
) -> CommunityModel:
    """Generate a community of ``n_buildings`` buildings cycling through the archetypes.

    Tariff and storage economics are read from ``config_path`` (the packaged
    default config when omitted). The same arguments always produce the same
    model.

    Raises:
        ModelValidationError: A dimension is smaller than one.
    """
    for name, value in (("n_buildings", n_buildings), ("n_scenarios", n_scenarios), ("n_periods", n_periods)):
        if int(value) < 1:
            raise ModelValidationError(name, "must be at least 1")
    rng = np.random.default_rng(seed)
    archetypes = list(ARCHETYPES)
    buildings = tuple(
        _building(rng, f"B{index + 1}", archetypes[index % len(archetypes)], n_scenarios, n_periods)
        for index in range(n_buildings)
    )
    probabilities = np.round(rng.dirichlet(np.ones(n_scenarios)), 6)
    probabilities[-1] = 1.0 - probabilities[:-1].sum()
    if probabilities[-1] < 0:
        probabilities = np.full(n_scenarios, 1.0 / n_scenarios)
    period_length = HOURS_PER_DAY / n_periods
    tariff, storage, options = economics_from_config(config_path, period_count=n_periods, period_length=period_length)
    model = CommunityModel(
        buildings=buildings,
        scenarios=ScenarioSet(probabilities, n_periods, period_length),
        tariff=tariff,
        storage=storage,
        sharing_mode=sharing_mode,
        periodic_soc=options.get("periodic_soc", False),
        demand_charge_import_only=options.get("demand_charge_import_only", False),
    )
    logger.info(
        "Generated synthetic community: %s",
        {"buildings": n_buildings, "scenarios": n_scenarios, "periods": n_periods, "seed": seed},
    )
    return model


def write_synthetic_community(
    directory, n_buildings: int, n_scenarios: int, n_periods: int = 24, seed: int = 0, *, config_path=None
) -> dict[str, Path]:
    """Generate a community and write its ``profiles.csv``, ``probabilities.csv`` and ``config.toml``."""
    model = generate_community(n_buildings, n_scenarios, n_periods, seed, config_path=config_path)
    return dump_community(model, directory)
