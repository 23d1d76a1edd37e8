"""Test cases for the economic comparison report."""

import json

import pandas as pd
import pytest

from community_storage.allocation import nucleolus
from community_storage.allocation import proportional
from community_storage.choices import AllocationMethod
from community_storage.choices import SharingMode
from community_storage.coalition_value import CharacteristicCache
from community_storage.exceptions import ModelMismatchError
from community_storage.games import StorageGame
from community_storage.metrics import COMMUNITY_ROW_ID
from community_storage.metrics import UNDEFINED
from community_storage.metrics import build_report
from community_storage.metrics import cost_reduction
from community_storage.metrics import value_of_storage
from community_storage.metrics import write_report
from community_storage.model import load_community
from example_project.conftest import FIXTURES
from example_project.conftest import make_community


@pytest.fixture(scope="module")
def witness_report():
    """Report of the witness community with nucleolus and proportional sharing, shared and pooled."""
    folder = FIXTURES / "proportional_witness"
    model = load_community(folder / "profiles.csv", folder / "config.toml")
    pooled_model = model.with_sharing_mode(SharingMode.POOLED)
    cache = CharacteristicCache()
    allocations = {
        AllocationMethod.NUCLEOLUS: nucleolus(StorageGame(model, cache)),
        AllocationMethod.PROPORTIONAL: proportional(model, cache),
    }
    pooled = {
        AllocationMethod.NUCLEOLUS: nucleolus(StorageGame(pooled_model, cache)),
        AllocationMethod.PROPORTIONAL: proportional(pooled_model, cache),
    }
    return model, build_report(model, cache, allocations, pooled_allocations=pooled)


class TestIndicators:
    """Test cases for the scalar indicators."""

    def test_value_of_storage(self):
        """Test the opex reduction per unit of capex."""
        assert value_of_storage(100.0, 80.0, 10.0) == pytest.approx(2.0)

    def test_value_of_storage_without_capex(self):
        """Test that no capital cost leaves the ratio undefined."""
        assert value_of_storage(100.0, 100.0, 0.0) is None

    def test_cost_reduction(self):
        """Test savings relative to the baseline, negative when costs rise."""
        assert cost_reduction(10.0, 7.5) == pytest.approx(0.25)
        assert cost_reduction(7.0, 9.0) == pytest.approx(-2 / 7)
        assert cost_reduction(0.0, 0.0) == 0.0


class TestBuildReport:
    """Test cases for assembling the report."""

    def test_buildings(self, witness_report):
        """Test the per-building rows against hand-computed costs."""
        _model, report = witness_report
        row = report.buildings[0]
        assert row.building_id == "A"
        assert row.baseline_no_es == pytest.approx(3.0)
        assert row.ies_total == pytest.approx(1.25, abs=1e-7)
        assert row.ies_opex == pytest.approx(1.0, abs=1e-7)
        assert row.cost_reduction_ies == pytest.approx(1.75 / 3.0, abs=1e-7)
        assert row.vos_ies == pytest.approx(8.0, abs=1e-5)
        assert row.ces_opex == pytest.approx(1.0, abs=1e-7)
        assert row.ces_total["nucleolus"] == pytest.approx(1.25, abs=1e-6)
        assert row.ces_total["proportional"] == pytest.approx(1.5, abs=1e-6)
        assert row.ces_capex_share["proportional"] == pytest.approx(0.5, abs=1e-6)
        assert row.vos_ces["nucleolus"] == pytest.approx(8.0, abs=1e-4)

    def test_conservation(self, witness_report):
        """Test that every method's shares add up to the grand coalition cost."""
        _model, report = witness_report
        for method in report.methods:
            total = sum(row.ces_total[method] for row in report.buildings)
            assert total == pytest.approx(report.community.ces_total, abs=1e-6)
            pooled = sum(row.pooled_total[method] for row in report.buildings)
            assert pooled == pytest.approx(report.community.pooled_total, abs=1e-6)

    def test_community(self, witness_report):
        """Test the community totals and their dominance order."""
        _model, report = witness_report
        community = report.community
        assert community.baseline_no_es == pytest.approx(12.0)
        assert community.ies_total == pytest.approx(7.5, abs=1e-6)
        assert community.ces_total == pytest.approx(7.5, abs=1e-6)
        assert community.energy_capacity == pytest.approx(6.0, abs=1e-6)
        assert community.pooled_total <= community.ces_total + 1e-6
        assert report.dominance_holds()

    def test_methods(self, witness_report):
        """Test that methods are listed by name."""
        _model, report = witness_report
        assert report.methods == ("nucleolus", "proportional")

    def test_mismatched_allocation(self, witness_report):
        """Test that an allocation of another model is rejected."""
        model, _report = witness_report
        pooled_model = model.with_sharing_mode(SharingMode.POOLED)
        cache = CharacteristicCache()
        foreign = {AllocationMethod.NUCLEOLUS: nucleolus(StorageGame(pooled_model, cache))}
        with pytest.raises(ModelMismatchError):
            build_report(model, cache, foreign)

    def test_mismatched_pooled_methods(self, witness_report):
        """Test that pooled allocations must cover the same methods."""
        model, _report = witness_report
        cache = CharacteristicCache()
        shared = {AllocationMethod.NUCLEOLUS: nucleolus(StorageGame(model, cache))}
        with pytest.raises(ModelMismatchError):
            build_report(model, cache, shared, pooled_allocations={})

    def test_baseline_count(self, witness_report):
        """Test that one baseline per building is required."""
        model, _report = witness_report
        cache = CharacteristicCache()
        shared = {AllocationMethod.NUCLEOLUS: nucleolus(StorageGame(model, cache))}
        with pytest.raises(ModelMismatchError):
            build_report(model, cache, shared, baselines=[1.0, 2.0])

    def test_undefined_value_of_storage(self):
        """Test that buildings without storage show an undefined value of storage."""
        model = make_community([[1.0, 2.0], [2.0, 1.0]], purchase=[1.0, 1.0], k_e=0.1, k_p=0.1)
        cache = CharacteristicCache()
        report = build_report(model, cache, {"nucleolus": nucleolus(StorageGame(model, cache))})
        assert report.buildings[0].vos_ies is None
        frame = report.to_frame()
        assert frame.loc[0, "vos_ies"] == UNDEFINED
        assert frame.loc[2, "vos_ces_nucleolus"] == UNDEFINED


class TestWriteReport:
    """Test cases for report files."""

    def test_files(self, witness_report, tmp_path):
        """Test the CSV table and the JSON document."""
        _model, report = witness_report
        csv_path, json_path = write_report(report, tmp_path)
        frame = pd.read_csv(csv_path)
        assert frame["id"].tolist() == ["A", "B", "C", COMMUNITY_ROW_ID]
        assert "ces_total_nucleolus" in frame.columns
        assert "pooled_total_proportional" in frame.columns
        document = json.loads(json_path.read_text(encoding="utf-8"))
        assert document["methods"] == ["nucleolus", "proportional"]
        assert document["dominance_holds"] is True
        assert document["buildings"][2]["ces"]["proportional"]["total"] == pytest.approx(4.5, abs=1e-6)
        assert document["community"]["ces_share"]["total"] == pytest.approx(report.community.pooled_total)


class TestDominanceChain:
    """Community cost ordering on the synthetic communities."""

    @pytest.mark.parametrize("name", ["community_five", "community_ten"])
    def test_chain(self, name, request):
        """Test ``CES+Share <= CES <= sum IES <= sum no-ES`` on the community totals."""
        model = request.getfixturevalue(name)
        report = build_report(model, CharacteristicCache(), {}, pooled_allocations={})
        community = report.community
        assert community.pooled_total <= community.ces_total + 1e-6
        assert community.ces_total <= community.ies_total + 1e-6
        assert community.ies_total <= community.baseline_no_es + 1e-6
        assert report.dominance_holds()
