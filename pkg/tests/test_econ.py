import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agtfp.config import BASELINE, Form, Hetero, Precip
from agtfp.econ import (
    build_design,
    coefficient_table,
    cumulative_lag_test,
    fit_design,
    fit_spec,
    fit_twoway_fe,
    response_band,
    response_curve,
    slope_change_test,
    split_sample_fits,
    weather_terms,
)
from agtfp.errors import DomainError, RankDeficientError
from agtfp.synth import oracle_fe_ols

from conftest import make_table

SMALL = build_design(make_table(n_countries=5, years=(1961, 1975)))


def panel_ids(n_countries, n_years):
    country = np.repeat([f"C{i}" for i in range(n_countries)], n_years)
    year = np.tile(np.arange(2000, 2000 + n_years), n_countries)
    return country, year


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_dummy_variable_oracle(seed):
    rng = np.random.default_rng(seed)
    country, year = panel_ids(3, 4)
    X = rng.normal(size=(12, 2))
    y = rng.normal(size=12)
    w = rng.uniform(0.5, 2.0, 12)
    fit = fit_twoway_fe(X, y, country, year, w)
    np.testing.assert_allclose(fit.beta.to_numpy(), oracle_fe_ols(X, y, country, year, w), rtol=1e-7, atol=1e-8)


class TestFit:
    def test_exact_recovery_without_noise(self):
        rt = make_table(beta={"dT": -0.05}, noise=0.0)
        fit = fit_spec(rt)
        assert fit.beta["dT"] == pytest.approx(-0.05, abs=1e-8)
        np.testing.assert_allclose(fit.beta[["dT2", "dP", "dP2"]], 0.0, atol=1e-8)
        assert fit.r2_within == pytest.approx(1.0)
        assert fit.converged

    def test_pure_fixed_effects_give_zero_slopes(self):
        fit = fit_spec(make_table(beta={}, noise=0.0))
        np.testing.assert_allclose(fit.beta, 0.0, atol=1e-8)

    def test_country_constant_column_is_absorbed(self):
        codes = pd.factorize(SMALL.country)[0].astype(float)
        with pytest.raises(RankDeficientError) as exc:
            fit_twoway_fe(np.column_stack([SMALL.X[:, 0], codes]), SMALL.y, SMALL.country, SMALL.year, names=["dT", "id"])
        assert exc.value.columns == ["id"]

    def test_duplicate_column(self):
        X = np.column_stack([SMALL.X[:, 0], SMALL.X[:, 0]])
        with pytest.raises(RankDeficientError):
            fit_twoway_fe(X, SMALL.y, SMALL.country, SMALL.year, names=["a", "b"])
        fit = fit_twoway_fe(X, SMALL.y, SMALL.country, SMALL.year, names=["a", "b"], drop_collinear=True)
        single = fit_twoway_fe(SMALL.X[:, :1], SMALL.y, SMALL.country, SMALL.year)
        assert len(fit.dropped) == 1
        assert (fit.beta == 0.0).sum() == 1
        assert fit.beta.sum() == pytest.approx(float(single.beta.iloc[0]), rel=1e-10)

    def test_effects_normalized_and_reconstruct_fitted_values(self):
        fit = fit_design(SMALL)
        a = fit.alpha.reindex(SMALL.country).to_numpy()
        t = fit.theta.reindex(SMALL.year).to_numpy()
        assert np.average(a, weights=SMALL.w) == pytest.approx(0.0, abs=1e-10)
        assert np.average(t, weights=SMALL.w) == pytest.approx(0.0, abs=1e-10)
        fe_part = SMALL.y - SMALL.X @ fit.beta.to_numpy() - fit.residuals
        np.testing.assert_allclose(fit.intercept + a + t, fe_part, atol=1e-6)

    def test_weight_scale_invariance(self):
        w = np.random.default_rng(1).uniform(0.5, 2.0, len(SMALL))
        a = fit_twoway_fe(SMALL.X, SMALL.y, SMALL.country, SMALL.year, w)
        b = fit_twoway_fe(SMALL.X, SMALL.y, SMALL.country, SMALL.year, 7.0 * w)
        np.testing.assert_allclose(a.beta, b.beta, rtol=1e-9, atol=1e-12)

    def test_nonpositive_weights_rejected(self):
        w = np.ones(len(SMALL))
        w[0] = 0.0
        with pytest.raises(DomainError):
            fit_twoway_fe(SMALL.X, SMALL.y, SMALL.country, SMALL.year, w)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=5, max_size=5))
def test_country_shifts_leave_slopes_unchanged(shifts):
    offset = pd.Series(shifts, index=sorted(set(SMALL.country))).reindex(SMALL.country).to_numpy()
    base = fit_design(SMALL).beta
    shifted = fit_twoway_fe(SMALL.X, SMALL.y + offset, SMALL.country, SMALL.year, SMALL.w, names=SMALL.names).beta
    np.testing.assert_allclose(shifted, base, atol=1e-9)


class TestDesign:
    def test_baseline_columns(self):
        assert SMALL.names == ["dT", "dT2", "dP", "dP2"]
        assert SMALL.w.mean() == pytest.approx(1.0)

    def test_cubic_without_precip(self):
        spec = BASELINE.replace(form=Form.cubic, precip=Precip.exclude)
        d = build_design(make_table(spec, n_countries=4, years=(1961, 1970)))
        assert d.names == ["dT", "dT2", "dT3"]

    def test_latitude_groups_interact_every_term(self):
        spec = BASELINE.replace(hetero=Hetero.lat3)
        d = build_design(make_table(spec, n_countries=6, years=(1961, 1970)))
        assert len(d.names) == 12
        assert d.names[:4] == ["dT@g0", "dT2@g0", "dP@g0", "dP2@g0"]
        # each row loads on exactly one group's columns
        nonzero = (d.X.reshape(len(d), 3, 4) != 0).any(axis=2)
        assert (nonzero.sum(axis=1) <= 1).all()

    def test_year_restriction(self):
        rt = make_table(n_countries=4, years=(1961, 1990))
        d = build_design(rt, BASELINE.replace(restriction="years:1962-1975"))
        assert d.year.min() == 1962 and d.year.max() == 1975

    def test_coldest_country_dropped(self):
        rt = make_table(n_countries=6, years=(1961, 1970))
        coldest = rt.frame.groupby("country")["T"].mean().idxmin()
        d = build_design(rt, BASELINE.replace(restriction="coldest10"))
        assert len(set(d.country)) == 5
        assert coldest not in set(d.country)

    def test_lag_terms(self):
        assert weather_terms(BASELINE, lags=1) == ["dT", "dT2", "dP", "dP2", "dT_l1", "dT2_l1", "dP_l1", "dP2_l1"]


class TestResponse:
    exposure = np.linspace(10.0, 30.0, 21)

    def test_zero_coefficients_give_flat_curve(self):
        beta = pd.Series({"dT": 0.0, "dT2": 0.0})
        out = response_curve(beta, "T", self.exposure, self.exposure)
        assert (out["value"] == 0.0).all()

    def test_marginal_effect(self):
        beta = pd.Series({"dT": -0.01, "dT2": -0.001})
        out = response_curve(beta, "T", np.array([10.0]), self.exposure)
        assert out["marginal"].iloc[0] == pytest.approx(-0.03)

    def test_centered_on_exposure(self):
        beta = pd.Series({"dT": -0.01, "dT2": -0.001})
        ew = np.linspace(1.0, 3.0, len(self.exposure))
        out = response_curve(beta, "T", self.exposure, self.exposure, ew)
        assert np.average(out["value"], weights=ew) == pytest.approx(0.0, abs=1e-12)

    def test_precip_marginal_is_per_mm(self):
        beta = pd.Series({"dT": 0.0, "dP": 0.05, "dP2": 0.0})
        out = response_curve(beta, "P", np.array([0.0]), np.array([500.0]))
        assert out["marginal"].iloc[0] == pytest.approx(5e-5)

    def test_band_contains_estimate_of_identical_draws(self):
        beta = pd.Series({"dT": -0.01, "dT2": -0.001})
        draws = pd.DataFrame([beta] * 5)
        band = response_band(draws, "T", self.exposure, self.exposure, estimate=beta)
        np.testing.assert_allclose(band["q2.5"], band["estimate"], atol=1e-15)
        np.testing.assert_allclose(band["q97.5"], band["estimate"], atol=1e-15)


def test_coefficient_table_with_draws():
    fit = fit_design(SMALL)
    draws = pd.DataFrame(np.random.default_rng(0).normal(size=(50, 4)), columns=SMALL.names)
    table = coefficient_table(fit, draws)
    assert table["term"].tolist() == SMALL.names
    assert (table["ci95_lo"] <= table["ci90_lo"]).all()
    assert (table["se"] > 0).all()
    assert "se" not in coefficient_table(fit).columns


def test_split_sample_fits_cover_both_periods():
    rt = make_table(n_countries=5, years=(1961, 2000))
    fits = split_sample_fits(rt, split_year=1989)
    assert list(fits) == ["1962-1988", "1989-2000"]


def test_lag_test_needs_history():
    rt = make_table(n_countries=4, years=(1961, 1970), lags=5, coverage=0.0)
    with pytest.raises(DomainError):
        cumulative_lag_test(rt, B=5)


@pytest.mark.slow
class TestAuxiliary:
    def test_slope_break_detected(self):
        rt = make_table(n_countries=30, beta={"dT": -0.01}, beta_post={"dT": -0.03}, split_year=1989)
        res = slope_change_test(rt, split_year=1989, B=100, seed=2)
        assert res.estimate == pytest.approx(-0.02, abs=0.005)
        assert res.p_value < 0.05
        assert res.n_before + res.n_after == len(rt)

    def test_offsetting_lag_sums_to_zero(self):
        rt = make_table(
            n_countries=20,
            beta={"dT": -0.05, "dT2": -0.002},
            lag_beta={"dT": 0.05, "dT2": 0.002},
            lags=1,
        )
        (temp, precip) = cumulative_lag_test(rt, B=100, seed=1)
        assert temp.variable == "T" and temp.df == 2
        assert abs(temp.sums["dT"]) < 0.01
        assert 0.0 <= temp.p_value <= 1.0
        assert precip.variable == "P"

    def test_contemporaneous_effect_is_not_offset(self):
        rt = make_table(n_countries=20, beta={"dT": -0.05}, lags=1)
        temp = cumulative_lag_test(rt, B=100, seed=1)[0]
        assert temp.sums["dT"] == pytest.approx(-0.05, abs=0.01)
        assert temp.p_value < 1e-6
