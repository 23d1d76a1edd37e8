"""Economic indicators comparing operation without storage, individual storage and community storage.

Three community arrangements are compared against a no-storage baseline:

- IES: every building sizes and operates its own storage (its singleton coalition).
- CES: the grand coalition shares one storage; the grand cost is split by an allocation method.
- CES+Share: as CES, with stored energy commonly owned (pooled sharing mode).

The Value of Storage is the operating cost reduction per unit of storage capital cost.
"""

import io
import json
import logging
import math
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import pandas as pd

from community_storage.choices import SharingMode
from community_storage.coalition_value import CharacteristicCache
from community_storage.coalition_value import CoalitionOutcome
from community_storage.coalition_value import building_opex
from community_storage.coalition_value import evaluate_coalition
from community_storage.coalition_value import ies_outcome
from community_storage.coalition_value import no_storage_cost
from community_storage.exceptions import ModelMismatchError
from community_storage.helpers import atomic_write_text
from community_storage.model import CommunityModel


logger = logging.getLogger("community_storage")

COMMUNITY_ROW_ID = "community"
UNDEFINED = "n/a"
DOMINANCE_TOLERANCE = 1e-6
ZERO_CAPEX = 1e-9


def value_of_storage(opex_no_es: float, opex: float, capex: float) -> float | None:
    """Operating cost reduction per unit of capital cost, ``(opex_no_es - opex) / capex``.

    Returns ``None`` when no storage was bought, so the ratio is undefined.
    """
    if not capex > ZERO_CAPEX:
        return None
    return (opex_no_es - opex) / capex


def cost_reduction(baseline: float, total: float) -> float:
    """Fraction of ``baseline`` saved by paying ``total`` instead; negative when ``total`` is larger."""
    if baseline == 0:
        return 0.0 if total == 0 else -math.copysign(math.inf, total)
    return (baseline - total) / baseline


@dataclass(frozen=True)
class BuildingRow:
    """Costs of one building under every arrangement.

    ``ces_total``, ``ces_capex_share``, ``cost_reduction_ces`` and ``vos_ces``
    are keyed by allocation method; ``pooled_total`` likewise for CES+Share.
    """

    building_id: str
    baseline_no_es: float
    ies_opex: float
    ies_capex: float
    ies_total: float
    cost_reduction_ies: float
    vos_ies: float | None
    ces_opex: float
    ces_total: Mapping[str, float] = field(default_factory=dict)
    ces_capex_share: Mapping[str, float] = field(default_factory=dict)
    cost_reduction_ces: Mapping[str, float] = field(default_factory=dict)
    vos_ces: Mapping[str, float | None] = field(default_factory=dict)
    pooled_total: Mapping[str, float] = field(default_factory=dict)
    cost_reduction_pooled: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class CommunityRow:
    """Community-wide totals; the ``pooled_*`` fields are ``None`` when CES+Share was not evaluated."""

    baseline_no_es: float
    ies_opex: float
    ies_capex: float
    ies_total: float
    cost_reduction_ies: float
    vos_ies: float | None
    ces_opex: float
    ces_capex: float
    ces_total: float
    energy_capacity: float
    power_capacity: float
    cost_reduction_ces: float
    vos_ces: float | None
    pooled_opex: float | None = None
    pooled_capex: float | None = None
    pooled_total: float | None = None
    cost_reduction_pooled: float | None = None
    vos_pooled: float | None = None


@dataclass(frozen=True)
class EconomicReport:
    """Per-building and community comparison of the storage arrangements of one community."""

    methods: tuple[str, ...]
    buildings: tuple[BuildingRow, ...]
    community: CommunityRow
    fingerprint: str

    def dominance_holds(self, tolerance: float = DOMINANCE_TOLERANCE) -> bool:
        """Whether community cost satisfies ``CES+Share <= CES <= sum IES <= sum no-ES``."""
        community = self.community
        chain = [community.ces_total, community.ies_total, community.baseline_no_es]
        if community.pooled_total is not None:
            chain.insert(0, community.pooled_total)
        return all(lower <= upper + tolerance * max(1.0, abs(upper)) for lower, upper in zip(chain, chain[1:]))

    def to_frame(self) -> pd.DataFrame:
        """One row per building followed by the community row, methods spread over columns."""
        records = []
        for row in self.buildings:
            record = {
                "id": row.building_id,
                "baseline_no_es": row.baseline_no_es,
                "ies_opex": row.ies_opex,
                "ies_capex": row.ies_capex,
                "ies_total": row.ies_total,
                "cost_reduction_ies": row.cost_reduction_ies,
                "vos_ies": _marker(row.vos_ies),
                "ces_opex": row.ces_opex,
            }
            for method in self.methods:
                record[f"ces_total_{method}"] = row.ces_total[method]
                record[f"ces_capex_share_{method}"] = row.ces_capex_share[method]
                record[f"cost_reduction_ces_{method}"] = row.cost_reduction_ces[method]
                record[f"vos_ces_{method}"] = _marker(row.vos_ces[method])
                if row.pooled_total:
                    record[f"pooled_total_{method}"] = row.pooled_total[method]
                    record[f"cost_reduction_pooled_{method}"] = row.cost_reduction_pooled[method]
                    record[f"vos_pooled_{method}"] = UNDEFINED
            records.append(record)

        community = self.community
        record = {
            "id": COMMUNITY_ROW_ID,
            "baseline_no_es": community.baseline_no_es,
            "ies_opex": community.ies_opex,
            "ies_capex": community.ies_capex,
            "ies_total": community.ies_total,
            "cost_reduction_ies": community.cost_reduction_ies,
            "vos_ies": _marker(community.vos_ies),
            "ces_opex": community.ces_opex,
        }
        for method in self.methods:
            record[f"ces_total_{method}"] = community.ces_total
            record[f"ces_capex_share_{method}"] = community.ces_capex
            record[f"cost_reduction_ces_{method}"] = community.cost_reduction_ces
            record[f"vos_ces_{method}"] = _marker(community.vos_ces)
            if community.pooled_total is not None:
                record[f"pooled_total_{method}"] = community.pooled_total
                record[f"cost_reduction_pooled_{method}"] = community.cost_reduction_pooled
                record[f"vos_pooled_{method}"] = _marker(community.vos_pooled)
        records.append(record)
        return pd.DataFrame.from_records(records)

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "methods": list(self.methods),
            "buildings": [
                {
                    "id": row.building_id,
                    "baseline_no_es": row.baseline_no_es,
                    "ies": {
                        "opex": row.ies_opex,
                        "capex": row.ies_capex,
                        "total": row.ies_total,
                        "cost_reduction": row.cost_reduction_ies,
                        "vos": row.vos_ies,
                    },
                    "ces": {
                        "opex": row.ces_opex,
                        **{
                            method: {
                                "total": row.ces_total[method],
                                "capex_share": row.ces_capex_share[method],
                                "cost_reduction": row.cost_reduction_ces[method],
                                "vos": row.vos_ces[method],
                            }
                            for method in self.methods
                        },
                    },
                    "ces_share": (
                        {
                            method: {
                                "total": row.pooled_total[method],
                                "cost_reduction": row.cost_reduction_pooled[method],
                                "vos": UNDEFINED,
                            }
                            for method in self.methods
                        }
                        if row.pooled_total
                        else None
                    ),
                }
                for row in self.buildings
            ],
            "community": {
                "baseline_no_es": self.community.baseline_no_es,
                "ies": {
                    "opex": self.community.ies_opex,
                    "capex": self.community.ies_capex,
                    "total": self.community.ies_total,
                    "cost_reduction": self.community.cost_reduction_ies,
                    "vos": self.community.vos_ies,
                },
                "ces": {
                    "opex": self.community.ces_opex,
                    "capex": self.community.ces_capex,
                    "total": self.community.ces_total,
                    "energy_capacity": self.community.energy_capacity,
                    "power_capacity": self.community.power_capacity,
                    "cost_reduction": self.community.cost_reduction_ces,
                    "vos": self.community.vos_ces,
                },
                "ces_share": (
                    {
                        "opex": self.community.pooled_opex,
                        "capex": self.community.pooled_capex,
                        "total": self.community.pooled_total,
                        "cost_reduction": self.community.cost_reduction_pooled,
                        "vos": self.community.vos_pooled,
                    }
                    if self.community.pooled_total is not None
                    else None
                ),
            },
            "dominance_holds": self.dominance_holds(),
        }


def _marker(value: float | None):
    return UNDEFINED if value is None else value


def _check_fingerprint(expected: str, actual: str | None, what: str):
    if actual != expected:
        logger.error("Report input from another model: %s", {"input": what, "expected": expected, "actual": actual})
        raise ModelMismatchError(f"{what} was computed for model {actual}, not {expected}")


def build_report(
    model: CommunityModel,
    cache: CharacteristicCache,
    allocations: Mapping,
    ies_outcomes: Sequence[CoalitionOutcome] | None = None,
    baselines: Sequence[float] | None = None,
    *,
    pooled_allocations: Mapping | None = None,
) -> EconomicReport:
    """Assemble the comparison report of ``model``.

    Args:
        model: The community; its sharing mode defines CES.
        cache: Characteristic-function cache shared with the allocation runs.
        allocations: Allocation results of ``model`` keyed by method.
        ies_outcomes: Singleton outcomes in building order; evaluated when omitted.
        baselines: No-storage costs in building order; computed when omitted.
        pooled_allocations: Allocation results of the pooled-sharing variant of ``model``,
            keyed by the same methods, for the CES+Share columns.

    Raises:
        ModelMismatchError: An input was computed for a different model.
    """
    fingerprint = model.fingerprint
    methods = tuple(str(getattr(method, "value", method)) for method in allocations)
    results = dict(zip(methods, allocations.values(), strict=True))
    for method, result in results.items():
        _check_fingerprint(fingerprint, result.fingerprint, f"{method} allocation")

    n = model.n_buildings
    if ies_outcomes is None:
        ies_outcomes = [ies_outcome(model, index, cache) for index in range(n)]
    if len(ies_outcomes) != n:
        raise ModelMismatchError(f"{len(ies_outcomes)} individual outcomes for {n} buildings")
    for outcome in ies_outcomes:
        _check_fingerprint(fingerprint, outcome.fingerprint, f"individual outcome {outcome.coalition.label()}")
    if baselines is None:
        baselines = [no_storage_cost(model, index) for index in range(n)]
    baselines = np.asarray(baselines, dtype=float)
    if baselines.size != n:
        raise ModelMismatchError(f"{baselines.size} baselines for {n} buildings")

    grand = evaluate_coalition(model, model.grand_coalition(), cache)
    ces_opex = building_opex(model, grand.schedule)

    pooled = None
    pooled_results = {}
    if pooled_allocations is not None:
        pooled_model = model.with_sharing_mode(SharingMode.POOLED)
        pooled_results = dict(
            zip(
                (str(getattr(method, "value", method)) for method in pooled_allocations),
                pooled_allocations.values(),
                strict=True,
            )
        )
        if set(pooled_results) != set(methods):
            raise ModelMismatchError("Pooled allocations must cover the same methods as the shared ones")
        for method, result in pooled_results.items():
            _check_fingerprint(pooled_model.fingerprint, result.fingerprint, f"pooled {method} allocation")
        pooled = evaluate_coalition(pooled_model, pooled_model.grand_coalition(), cache)

    rows = []
    for index, building_id in enumerate(model.building_ids):
        ies = ies_outcomes[index]
        ces_total = {method: results[method].allocation[index] for method in methods}
        capex_share = {method: total - float(ces_opex[index]) for method, total in ces_total.items()}
        pooled_total = {method: pooled_results[method].allocation[index] for method in pooled_results}
        rows.append(
            BuildingRow(
                building_id=building_id,
                baseline_no_es=float(baselines[index]),
                ies_opex=ies.expected_opex,
                ies_capex=ies.capex,
                ies_total=ies.value,
                cost_reduction_ies=cost_reduction(float(baselines[index]), ies.value),
                vos_ies=value_of_storage(float(baselines[index]), ies.expected_opex, ies.capex),
                ces_opex=float(ces_opex[index]),
                ces_total=ces_total,
                ces_capex_share=capex_share,
                cost_reduction_ces={
                    method: cost_reduction(float(baselines[index]), total) for method, total in ces_total.items()
                },
                vos_ces={
                    method: value_of_storage(float(baselines[index]), float(ces_opex[index]), capex_share[method])
                    for method in methods
                },
                pooled_total=pooled_total,
                cost_reduction_pooled={
                    method: cost_reduction(float(baselines[index]), total) for method, total in pooled_total.items()
                },
            )
        )

    baseline_total = float(baselines.sum())
    ies_opex = float(sum(outcome.expected_opex for outcome in ies_outcomes))
    ies_capex = float(sum(outcome.capex for outcome in ies_outcomes))
    ies_total = float(sum(outcome.value for outcome in ies_outcomes))
    community = CommunityRow(
        baseline_no_es=baseline_total,
        ies_opex=ies_opex,
        ies_capex=ies_capex,
        ies_total=ies_total,
        cost_reduction_ies=cost_reduction(baseline_total, ies_total),
        vos_ies=value_of_storage(baseline_total, ies_opex, ies_capex),
        ces_opex=grand.expected_opex,
        ces_capex=grand.capex,
        ces_total=grand.value,
        energy_capacity=grand.energy_capacity,
        power_capacity=grand.power_capacity,
        cost_reduction_ces=cost_reduction(baseline_total, grand.value),
        vos_ces=value_of_storage(baseline_total, grand.expected_opex, grand.capex),
        pooled_opex=pooled.expected_opex if pooled else None,
        pooled_capex=pooled.capex if pooled else None,
        pooled_total=pooled.value if pooled else None,
        cost_reduction_pooled=cost_reduction(baseline_total, pooled.value) if pooled else None,
        vos_pooled=value_of_storage(baseline_total, pooled.expected_opex, pooled.capex) if pooled else None,
    )
    report = EconomicReport(methods, tuple(rows), community, fingerprint)
    logger.info(
        "Built economic report: %s",
        {
            "methods": list(methods),
            "no_es": baseline_total,
            "ies": ies_total,
            "ces": grand.value,
            "ces_share": community.pooled_total,
            "dominance_holds": report.dominance_holds(),
        },
    )
    if not report.dominance_holds():
        logger.warning("Community costs out of dominance order: %s", report.to_dict()["community"])
    return report


def write_report(report: EconomicReport, directory) -> tuple[Path, Path]:
    """Write ``report.csv`` and ``report.json`` into ``directory``."""
    directory = Path(directory)
    buffer = io.StringIO()
    report.to_frame().to_csv(buffer, index=False, lineterminator="\n")
    csv_path = atomic_write_text(directory / "report.csv", buffer.getvalue())
    json_path = atomic_write_text(directory / "report.json", json.dumps(report.to_dict(), indent=2) + "\n")
    logger.info("Wrote report: %s", {"csv": str(csv_path), "json": str(json_path)})
    return csv_path, json_path
