import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agtfp.config import WEATHER_VARS, AggWeights
from agtfp.downscale import (
    CapReport,
    Climatology,
    Kind,
    QmapTable,
    ScenarioLog,
    ScenarioSet,
    apply_quantile_map,
    assemble_scenarios,
    correct_series,
    downscale_member,
    fit_quantile_map,
    load_scenario_manifest,
    spatial_disaggregate,
)
from agtfp.errors import DataValidationError, DomainError
from agtfp.gridops import FieldSeries, GridField, GridSpec, Variable
from agtfp.season import combined_weights

ONE = GridSpec(0.0, 0.0, 2.0, 2.0, 1, 1)
FINE = GridSpec(-0.5, -0.5, 1.0, 1.0, 2, 2)


def yearly(variable, values_by_year, years=(2000, 2001, 2002)):
    """One value per year, repeated for every calendar month."""
    ys = np.repeat(years, 12)
    ms = np.tile(np.arange(1, 13), len(years))
    values = np.repeat(np.asarray(values_by_year, dtype=float), 12).reshape(-1, 1, 1)
    return FieldSeries(ONE, variable, ys, ms, values)


def fitted(variable):
    return fit_quantile_map(yearly(variable, [1, 2, 3]), yearly(variable, [10, 20, 30]), (2000, 2002))


class TestQuantileMap:
    @pytest.mark.parametrize("x, expected", [(2.0, 20.0), (1.5, 15.0), (4.0, 31.0), (0.0, 9.0)])
    def test_additive(self, x, expected):
        q = fitted(Variable.tmean)
        assert q.kind == Kind.additive
        assert apply_quantile_map(q, x, (0, 0), 7) == pytest.approx(expected)

    @pytest.mark.parametrize("x, expected", [(6.0, 60.0), (0.5, 5.0), (2.5, 25.0)])
    def test_ratio(self, x, expected):
        q = fitted(Variable.precip)
        assert q.kind == Kind.ratio
        assert apply_quantile_map(q, x, (0, 0), 1) == pytest.approx(expected)

    def test_constant_model_maps_to_observed_median(self):
        q = fit_quantile_map(yearly(Variable.tmean, [5, 5, 5]), yearly(Variable.tmean, [10, 20, 30]), (2000, 2002))
        np.testing.assert_allclose(apply_quantile_map(q, np.array([1.0, 5.0, 9.0]), (0, 0), 3), 20.0)

    def test_single_training_year(self):
        with pytest.raises(DomainError):
            fit_quantile_map(yearly(Variable.tmean, [1, 2, 3]), yearly(Variable.tmean, [10, 20, 30]), (2001, 2001))

    def test_missing_value_stays_missing(self):
        out = apply_quantile_map(fitted(Variable.tmean), np.array([np.nan, 2.0]), (0, 0), 5)
        assert np.isnan(out[0]) and out[1] == pytest.approx(20.0)

    def test_grids_must_match(self):
        other = FieldSeries(FINE, Variable.tmean, [2000] * 12, range(1, 13), np.zeros((12, 2, 2)))
        with pytest.raises(DataValidationError):
            fit_quantile_map(yearly(Variable.tmean, [1, 2, 3]), other, (2000, 2002))

    @pytest.mark.parametrize("variable", [Variable.tmean, Variable.precip])
    def test_training_series_maps_onto_observed(self, variable):
        rng = np.random.default_rng(11)
        years = np.repeat(np.arange(2000, 2006), 12)
        months = np.tile(np.arange(1, 13), 6)
        model = FieldSeries(ONE, variable, years, months, rng.gamma(4.0, 5.0, (72, 1, 1)))
        obs = FieldSeries(ONE, variable, years, months, rng.gamma(4.0, 5.0, (72, 1, 1)))
        corrected = correct_series(fit_quantile_map(model, obs, (2000, 2005)), model)
        for month in range(1, 13):
            sel = months == month
            np.testing.assert_allclose(np.sort(corrected.values[sel, 0, 0]), np.sort(obs.values[sel, 0, 0]), rtol=1e-12)


def table(kind, model, obs):
    model_q = np.tile(np.sort(model), (12, 1, 1, 1))
    obs_q = np.tile(np.sort(obs), (12, 1, 1, 1))
    return QmapTable(ONE, kind, model_q, obs_q, (2000, 2002))


quantiles = st.lists(st.floats(0.0, 500.0, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=50, deadline=None)
@given(model=quantiles, obs=quantiles, xs=st.lists(st.floats(0.0, 600.0, allow_nan=False), min_size=2, max_size=20))
def test_mapping_is_monotone(model, obs, xs):
    x = np.sort(np.asarray(xs))
    for kind in Kind:
        out = apply_quantile_map(table(kind, model, obs), x, (0, 0), 6)
        assert (np.diff(out) >= -1e-9).all()
    assert (apply_quantile_map(table(Kind.ratio, model, obs), x, (0, 0), 6) >= 0).all()


def clim(spec, value, variable=Variable.tmean):
    return Climatology(spec, variable, np.full((12, *spec.shape), float(value)), (2000, 2002))


class TestDisaggregate:
    def test_climatological_month_returns_fine_climatology(self):
        fine = Climatology(FINE, Variable.tmean, np.arange(48.0).reshape(12, 2, 2), (2000, 2002))
        bc = GridField(ONE, np.array([[10.0]]), Variable.tmean, "2001-03")
        for kind in Kind:
            out = spatial_disaggregate(bc, clim(ONE, 10.0), fine, kind)
            np.testing.assert_array_equal(out.values, fine.month(3))

    def test_additive_anomaly(self):
        bc = GridField(ONE, np.array([[12.0]]), Variable.tmean, "2001-07")
        out = spatial_disaggregate(bc, clim(ONE, 10.0), clim(FINE, 15.0), Kind.additive)
        np.testing.assert_allclose(out.values, 17.0)
        assert out.spec.same_as(FINE)

    def test_ratio_anomaly(self):
        bc = GridField(ONE, np.array([[120.0]]), Variable.precip, "2001-07")
        out = spatial_disaggregate(bc, clim(ONE, 100.0, Variable.precip), clim(FINE, 80.0, Variable.precip), Kind.ratio)
        np.testing.assert_allclose(out.values, 96.0)

    def test_ratio_cap(self):
        report = CapReport()
        bc = GridField(ONE, np.array([[1000.0]]), Variable.precip, "2001-07")
        out = spatial_disaggregate(
            bc, clim(ONE, 100.0, Variable.precip), clim(FINE, 80.0, Variable.precip), Kind.ratio, report=report
        )
        np.testing.assert_allclose(out.values, 400.0)
        assert report.hits == [("2001-07", 1)]
        assert report.total == 1

    def test_dry_month_stays_dry(self):
        bc = GridField(ONE, np.array([[0.0]]), Variable.precip, "2001-01")
        out = spatial_disaggregate(bc, clim(ONE, 100.0, Variable.precip), clim(FINE, 80.0, Variable.precip), Kind.ratio)
        assert (out.values == 0.0).all()


@pytest.fixture(scope="module")
def calm_members(calm_world):
    """First climate model of the no-warming world, downscaled."""
    return {"GCM1": downscale_member(calm_world.gcm["GCM1"], calm_world.observed)}


@pytest.fixture(scope="module")
def calm_weights(calm_world):
    return {agg.value: combined_weights(calm_world.cropland, calm_world.pasture, agg) for agg in AggWeights}


class TestAssemble:
    def test_forcing_free_world_has_identical_scenarios(self, calm_world, calm_members, calm_weights):
        ss = assemble_scenarios(calm_members, calm_weights, calm_world.mask, calm_world.season_maps)
        assert ss.gcms == ["GCM1"]
        with_ = ss.frame[ss.frame["scenario"] == "with"].reset_index(drop=True)
        without = ss.frame[ss.frame["scenario"] == "without"].reset_index(drop=True)
        assert len(with_) == len(without) > 0
        np.testing.assert_array_equal(with_[list(WEATHER_VARS)].to_numpy(), without[list(WEATHER_VARS)].to_numpy())
        assert set(ss.baseline["country"]) == set(calm_world.countries)

    def test_incomplete_member_dropped(self, calm_world, calm_members, calm_weights):
        partial = {k: v for k, v in calm_members["GCM1"].items() if k != "ssp245"}
        log = ScenarioLog()
        ss = assemble_scenarios(
            {"GCM1": calm_members["GCM1"], "GCM2": partial}, calm_weights, calm_world.mask, calm_world.season_maps, log=log
        )
        assert ss.gcms == ["GCM1"]
        assert [g for g, _ in log.dropped_gcms] == ["GCM2"]

    def test_no_complete_member(self, calm_world, calm_members, calm_weights):
        partial = {k: v for k, v in calm_members["GCM1"].items() if k != "hist-nat"}
        with pytest.raises(DataValidationError):
            assemble_scenarios({"GCM2": partial}, calm_weights, calm_world.mask, calm_world.season_maps)


class TestScenarioFiles:
    def test_manifest_paths_resolve_relative(self, tmp_path):
        doc = {"members": [{"gcm": "M1", "files": {"historical": {"tmean": "grids/t.grid"}}}]}
        (tmp_path / "scenarios.json").write_text(json.dumps(doc))
        (member,) = load_scenario_manifest(tmp_path / "scenarios.json")
        assert member.files["historical"]["tmean"] == [tmp_path.resolve() / "grids" / "t.grid"]
        assert not member.complete(["tmean"])

    @pytest.mark.parametrize(
        "doc",
        [
            {"members": [{"gcm": "M1", "files": {}}, {"gcm": "M1", "files": {}}]},
            {"members": [{"gcm": "M1", "files": {"rcp85": {}}}]},
            {"members": []},
        ],
    )
    def test_bad_manifest(self, tmp_path, doc):
        (tmp_path / "scenarios.json").write_text(json.dumps(doc))
        with pytest.raises(DataValidationError):
            load_scenario_manifest(tmp_path / "scenarios.json")

    def test_unknown_scenario_label(self, tmp_path):
        frame = pd.DataFrame(
            [["cropland", "green", "M1", "rcp", "AAA", 1962, 20.0, 15.0, 25.0, 500.0]],
            columns=["agg_weights", "window", "gcm", "scenario", "country", "year", *WEATHER_VARS],
        )
        base = pd.DataFrame(
            [["cropland", "green", "M1", "AAA", 1950, 1972, 20.0, 15.0, 25.0, 500.0]],
            columns=["agg_weights", "window", "gcm", "country", "first_year", "last_year", *WEATHER_VARS],
        )
        ScenarioSet(frame, base).to_csv(tmp_path / "s.csv", tmp_path / "b.csv")
        with pytest.raises(DataValidationError, match="scenario labels"):
            ScenarioSet.read_csv(tmp_path / "s.csv", tmp_path / "b.csv")

    def test_variant_selection(self, tmp_path):
        frame = pd.DataFrame(
            [["cropland", "green", "M1", "with", "AAA", 1962, 20.0, 15.0, 25.0, 500.0]],
            columns=["agg_weights", "window", "gcm", "scenario", "country", "year", *WEATHER_VARS],
        )
        ss = ScenarioSet(frame, frame.iloc[:0])
        assert len(ss.variant("cropland", "green").frame) == 1
        with pytest.raises(DataValidationError):
            ss.variant("cropland", "calendar")
