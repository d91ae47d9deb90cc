import numpy as np
import pandas as pd
import pytest

from agtfp.config import BASELINE, WORLD, Precip
from agtfp.counterfactual import (
    YEARS,
    ImpactEnsemble,
    aggregate_regions,
    cumulative_impact,
    ensemble_impacts,
    format_years_lost,
    impact_path,
    impact_summary,
    observed_log_path,
    project_and_level,
    scenario_anomalies,
    years_lost,
)
from agtfp.dataio import CountryMeta, GrowthPanel
from agtfp.downscale import ScenarioSet
from agtfp.errors import DataValidationError
from agtfp.inference import BootstrapEnsemble
from agtfp.synth import analytic_linear_impact


def scenarios(countries, trend=0.0, seed=0, swap=False):
    """One GCM; with-ACC is the unforced path plus a linear warming trend from 1961."""
    rng = np.random.default_rng(seed)
    rows = []
    for c in countries:
        t = 20.0 + rng.normal(0.0, 0.5, len(YEARS))
        p = 500.0 * np.exp(rng.normal(0.0, 0.1, len(YEARS)))
        warm = t + trend * (YEARS - 1961) / 10.0
        labels = ("without", "with") if swap else ("with", "without")
        for label, temp in zip(labels, (warm, t)):
            rows.append(
                pd.DataFrame(
                    {"gcm": "G1", "scenario": label, "country": c, "year": YEARS, "tmean": temp, "tmin": temp - 5, "tmax": temp + 5, "precip": p}
                )
            )
    frame = pd.concat(rows, ignore_index=True)
    base = pd.DataFrame(
        {"gcm": "G1", "country": countries, "first_year": 1950, "last_year": 1972, "tmean": 20.0, "tmin": 15.0, "tmax": 25.0, "precip": 500.0}
    )
    return ScenarioSet(frame, base)


def ensemble(beta, B=3):
    draws = pd.DataFrame([beta] * B)
    draws.index.name = "draw_id"
    return BootstrapEnsemble(draws=draws, seed=0)


LINEAR = {"dT": -0.05, "dT2": 0.0, "dP": 0.0, "dP2": 0.0}


class TestCumulativeImpact:
    def test_running_sum_from_1962(self):
        anoms = pd.DataFrame({"year": [1962, 1963], "dT": [0.1, 0.2]})
        path = cumulative_impact(pd.Series({"dT": -0.1}), anoms)
        assert path.index.tolist() == [1961, 1962, 1963]
        np.testing.assert_allclose(path.to_numpy(), [0.0, -0.01, -0.03])

    def test_quadratic_term(self):
        anoms = pd.DataFrame({"year": [1962, 1963], "dT": [0.1, 0.2], "dT2": [0.01, 0.04]})
        path = cumulative_impact(pd.Series({"dT": 0.0, "dT2": -1.0}), anoms)
        np.testing.assert_allclose(path.to_numpy(), [0.0, -0.01, -0.05])

    def test_anomalies_against_baseline(self):
        ss = scenarios(["AAA"])
        ss.frame.loc[:, "tmean"] = 21.0
        ss.frame.loc[:, "precip"] = 600.0
        anoms = scenario_anomalies(ss, BASELINE)
        np.testing.assert_allclose(anoms["dT"], 1.0)
        np.testing.assert_allclose(anoms["dT2"], 1.0)
        np.testing.assert_allclose(anoms["dP"], 0.1)
        np.testing.assert_allclose(anoms["dP2"], 0.01)
        no_p = scenario_anomalies(ss, BASELINE.replace(precip=Precip.exclude))
        assert "dP" not in no_p.columns

    def test_missing_baseline(self):
        ss = scenarios(["AAA", "BBB"])
        ss = ScenarioSet(ss.frame, ss.baseline[ss.baseline["country"] == "AAA"])
        with pytest.raises(DataValidationError, match="baseline"):
            scenario_anomalies(ss, BASELINE)

    def test_impact_path_difference(self):
        anoms = scenario_anomalies(scenarios(["AAA"], trend=0.3), BASELINE)
        beta = pd.Series(LINEAR)
        with_ = anoms[anoms["scenario"] == "with"]
        without = anoms[anoms["scenario"] == "without"]
        path = impact_path(beta, with_, without)
        assert path["impact"].iloc[-1] == pytest.approx(analytic_linear_impact(-0.05, 0.3), abs=1e-10)


class TestEnsemble:
    def test_linear_trend_matches_closed_form(self):
        ie = ensemble_impacts(ensemble(LINEAR), scenarios(["AAA", "BBB"], trend=0.3), BASELINE, n=10, seed=1)
        assert ie.impacts.shape == (10, 2, len(YEARS))
        assert (ie.impacts[:, :, 0] == 0.0).all()
        np.testing.assert_allclose(ie.impacts[:, :, -1], analytic_linear_impact(-0.05, 0.3), atol=1e-10)
        assert analytic_linear_impact(-0.05, 0.3) == pytest.approx(-2.655)

    def test_identical_scenarios_give_zero(self):
        ie = ensemble_impacts(ensemble({"dT": -0.05, "dT2": -0.002, "dP": 0.05, "dP2": -0.05}), scenarios(["AAA"]), BASELINE, n=5)
        assert (ie.impacts == 0.0).all()

    def test_swapping_scenarios_flips_sign(self):
        beta = {"dT": -0.05, "dT2": -0.002, "dP": 0.05, "dP2": -0.05}
        a = ensemble_impacts(ensemble(beta), scenarios(["AAA"], trend=0.2, seed=3), BASELINE, n=4)
        b = ensemble_impacts(ensemble(beta), scenarios(["AAA"], trend=0.2, seed=3, swap=True), BASELINE, n=4)
        np.testing.assert_allclose(a.impacts, -b.impacts, atol=1e-12)

    def test_linear_in_coefficients(self):
        beta = {"dT": -0.05, "dT2": -0.002, "dP": 0.05, "dP2": -0.05}
        ss = scenarios(["AAA"], trend=0.2, seed=3)
        a = ensemble_impacts(ensemble(beta), ss, BASELINE, n=4)
        b = ensemble_impacts(ensemble({k: 2 * v for k, v in beta.items()}), ss, BASELINE, n=4)
        np.testing.assert_allclose(b.impacts, 2 * a.impacts, rtol=1e-10, atol=1e-14)

    def test_members_are_reproducible(self):
        draws = pd.DataFrame({"dT": [-0.01, -0.02, -0.03], "dT2": 0.0, "dP": 0.0, "dP2": 0.0})
        ens = BootstrapEnsemble(draws=draws, seed=0)
        ss = scenarios(["AAA"], trend=0.3)
        a = ensemble_impacts(ens, ss, BASELINE, n=20, seed=9)
        b = ensemble_impacts(ens, ss, BASELINE, n=20, seed=9)
        pd.testing.assert_frame_equal(a.members, b.members)
        assert set(a.members["draw_id"]) <= {0, 1, 2}

    def test_missing_year(self):
        ss = scenarios(["AAA"], trend=0.3)
        ss = ScenarioSet(ss.frame[ss.frame["year"] != 1990], ss.baseline)
        with pytest.raises(DataValidationError, match="1990"):
            ensemble_impacts(ensemble(LINEAR), ss, BASELINE, n=2)


def meta():
    return CountryMeta.from_frame(
        pd.DataFrame(
            {"country": ["AAA", "BBB", "CCC"], "region": ["AFR", "AFR", "ASIA"], "latitude": [0.0, 10.0, 30.0], "revenue_weight": [1.0, 1.0, 2.0]}
        )
    )


def constant_ensemble(values):
    impacts = np.stack([np.full(len(YEARS), v) for v in values])[None]
    return ImpactEnsemble(impacts, ["AAA", "BBB", "CCC"][: len(values)], YEARS.copy(), pd.DataFrame({"member_id": [0]}))


class TestAggregation:
    def test_revenue_weighted_regions(self):
        regional = aggregate_regions(constant_ensemble([-0.1, -0.3, -0.5]), meta())
        assert set(regional) == {"AFR", "ASIA", WORLD}
        np.testing.assert_allclose(regional["AFR"], -0.2)
        np.testing.assert_allclose(regional["ASIA"], -0.5)
        np.testing.assert_allclose(regional[WORLD], (-0.1 - 0.3 - 1.0) / 4.0)

    def test_aggregate_within_member_range(self):
        impacts = np.random.default_rng(8).normal(0.0, 0.2, (6, 3, len(YEARS)))
        ie = ImpactEnsemble(impacts, ["AAA", "BBB", "CCC"], YEARS.copy(), pd.DataFrame({"member_id": range(6)}))
        regional = aggregate_regions(ie, meta())
        for unit, members in (("AFR", [0, 1]), ("ASIA", [2]), (WORLD, [0, 1, 2])):
            lo = impacts[:, members].min(axis=1)
            hi = impacts[:, members].max(axis=1)
            assert (regional[unit] >= lo - 1e-12).all()
            assert (regional[unit] <= hi + 1e-12).all()

    def test_unknown_country(self):
        ie = constant_ensemble([-0.1])
        ie.countries = ["ZZZ"]
        with pytest.raises(DataValidationError):
            aggregate_regions(ie, meta())


def growth(rate=0.02, last=2015, countries=("AAA", "BBB", "CCC"), skip=None, first=1962):
    rows = [(c, y, rate) for c in countries for y in range(first, last + 1) if (c, y) != skip]
    return GrowthPanel(pd.DataFrame(rows, columns=["country", "year", "dln_tfp"]))


class TestLevels:
    def test_zero_impact_counterfactual_is_observed(self):
        ie = constant_ensemble([0.0, 0.0, 0.0])
        lp = project_and_level(growth(), ie)
        assert lp.years[0] == 1962 and lp.years[-1] == 2020
        assert lp.observed.loc["AAA", 1962] == pytest.approx(100.0)
        assert lp.observed.loc["AAA", 2020] == pytest.approx(100.0 * np.exp(0.02 * 58))
        np.testing.assert_allclose(lp.counterfactual["AAA"][0], lp.observed.loc["AAA"].to_numpy())

    def test_constant_yearly_drag(self):
        delta = 0.004
        impacts = np.broadcast_to(delta * (YEARS - 1961.0), (1, 3, len(YEARS))).copy()
        ie = ImpactEnsemble(impacts, ["AAA", "BBB", "CCC"], YEARS.copy(), pd.DataFrame({"member_id": [0]}))
        lp = project_and_level(growth(), ie)
        ratio = lp.counterfactual["BBB"][0] / lp.observed.loc["BBB"].to_numpy()
        np.testing.assert_allclose(ratio, np.exp(-delta * (lp.years - 1961.0)), rtol=1e-12)

    def test_regional_paths(self):
        ie = constant_ensemble([0.0, 0.0, 0.0])
        lp = project_and_level(growth(), ie, meta(), aggregate_regions(ie, meta()))
        assert WORLD in lp.counterfactual
        assert lp.observed.loc[WORLD, 2020] == pytest.approx(100.0 * np.exp(0.02 * 58))

    def test_gap_in_history(self):
        with pytest.raises(DataValidationError, match="gaps"):
            observed_log_path(growth(skip=("AAA", 1970)), ["AAA"])

    def test_late_starter(self):
        panel = GrowthPanel(pd.concat([growth(countries=("AAA", "BBB")).frame, growth(0.03, countries=("CCC",), first=1996).frame]))
        cum = observed_log_path(panel, ["AAA", "BBB", "CCC"])
        assert cum.loc["CCC", 1995] == 0.0
        assert np.isnan(cum.loc["CCC", 1994])
        assert cum.loc["AAA", 1961] == 0.0

        ie = constant_ensemble([0.0, 0.0, 0.0])
        lp = project_and_level(panel, ie, meta(), aggregate_regions(ie, meta()))
        assert np.isnan(lp.observed.loc["CCC", 1994])
        assert lp.observed.loc["CCC", 1995] == pytest.approx(100.0)
        assert lp.observed.loc["CCC", 2020] == pytest.approx(100.0 * np.exp(0.03 * 25))
        np.testing.assert_allclose(lp.counterfactual["CCC"][0], lp.observed.loc["CCC"].to_numpy())
        np.testing.assert_allclose(lp.observed.loc["ASIA"].to_numpy(), lp.observed.loc["CCC"].to_numpy())

        world = lp.observed.loc[WORLD]
        assert not world.isna().any()
        assert world[1962] == pytest.approx(100.0)
        # AAA and BBB alone until 1995, then CCC joins with twice their weight
        assert world[1995] == pytest.approx(100.0 * np.exp(0.02 * 33))
        assert world[2020] == pytest.approx(100.0 * np.exp(0.02 * 33 + 0.025 * 25))

    def test_levels_recover_impacts(self):
        rng = np.random.default_rng(4)
        impacts = rng.normal(0.0, 0.1, (4, 3, len(YEARS)))
        impacts[:, :, 0] = 0.0
        ie = ImpactEnsemble(impacts, ["AAA", "BBB", "CCC"], YEARS.copy(), pd.DataFrame({"member_id": range(4)}))
        panel = GrowthPanel(pd.concat([growth(countries=("AAA", "BBB")).frame, growth(0.03, countries=("CCC",), first=1996).frame]))
        regional = aggregate_regions(ie, meta())
        lp = project_and_level(panel, ie, meta(), regional)
        expected = {c: impacts[:, i, 1:] for i, c in enumerate(ie.countries)} | {u: v[:, 1:] for u, v in regional.items()}
        for unit, imp in expected.items():
            obs = lp.observed.loc[unit].to_numpy()
            valid = ~np.isnan(obs)
            recovered = np.log(lp.counterfactual[unit][:, valid] / obs[valid])
            np.testing.assert_allclose(recovered, -imp[:, valid], rtol=0, atol=1e-10)

    def test_short_projection_history_recorded(self):
        panel = GrowthPanel(pd.concat([growth(countries=("AAA",)).frame, growth(last=2010, countries=("BBB",)).frame]))
        log = []
        cum = observed_log_path(panel, ["AAA", "BBB"], log)
        assert log == [("BBB", 5)]
        assert cum.loc["BBB", 2020] == pytest.approx(0.02 * 59)


class TestYearsLost:
    years = np.arange(1962, 2021)

    def test_interpolated_crossing(self):
        cf = 100.0 * np.exp(0.02 * (self.years - 1962) + 0.18)
        assert years_lost(100.0 * np.exp(0.02 * 58), cf, self.years) == pytest.approx(9.0, abs=0.1)

    def test_identical_paths(self):
        path = 100.0 * np.exp(0.02 * (self.years - 1962))
        assert years_lost(path[-1], path, self.years) == pytest.approx(0.0, abs=1e-9)

    def test_never_reached(self):
        cf = np.full(len(self.years), 90.0)
        lost = years_lost(100.0, cf, self.years)
        assert np.isinf(lost)
        assert format_years_lost(lost) == ">58 years"
        assert format_years_lost(3.21234) == 3.212


def test_zero_impact_headline():
    ie = constant_ensemble([0.0, 0.0, 0.0])
    regional = aggregate_regions(ie, meta())
    lp = project_and_level(growth(), ie, meta(), regional)
    summary = impact_summary(ie, regional, lp)
    assert summary.headline["global_mean_pct"] == 0.0
    assert summary.headline["years_lost_mean"] == 0.0
    assert set(summary.regional_2020["unit"]) == {"AFR", "ASIA", WORLD}
    assert summary.regional_2020.loc[summary.regional_2020["unit"] == WORLD, "name"].item() == "World"
