"""Shared synthetic panels and worlds."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from agtfp.config import BASELINE, ModelSpec, Region
from agtfp.dataio import CountryMeta, GrowthPanel, RegTable, assemble_panel
from agtfp.synth import World, WorldParams, generate_world

REGIONS = [r.value for r in Region]

DEFAULT_BETA = {"dT": -0.05, "dT2": -0.002, "dP": 0.05, "dP2": -0.05}


def make_inputs(
    n_countries: int = 10,
    years: tuple[int, int] = (1961, 2000),
    beta: dict[str, float] | None = None,
    *,
    lag_beta: dict[str, float] | None = None,
    beta_post: dict[str, float] | None = None,
    split_year: int = 1989,
    noise: float = 0.01,
    seed: int = 0,
    n_regions: int = 3,
) -> tuple[GrowthPanel, pd.DataFrame, CountryMeta]:
    """Growth panel, one-variant seasonal weather and metadata from a known linear DGP.

    Growth in year t responds to the change of seasonal weather from t-1 to t
    through ``beta`` (``beta_post`` from ``split_year`` on) and, optionally, to
    the previous year's change through ``lag_beta``.
    """
    rng = np.random.default_rng(seed)
    beta = DEFAULT_BETA if beta is None else beta
    countries = [f"K{i:02d}" for i in range(n_countries)]
    ys = np.arange(years[0], years[1] + 1)
    T = rng.normal(20.0, 1.0, (n_countries, len(ys)))
    P = rng.uniform(300.0, 900.0, (n_countries, len(ys)))
    dT = np.diff(T, axis=1)
    dP = np.diff(P, axis=1) / 1000.0
    terms = {"dT": dT, "dT2": dT**2, "dT3": dT**3, "dP": dP, "dP2": dP**2, "dP3": dP**3}
    growth_years = ys[1:]

    def response(b: dict[str, float]) -> np.ndarray:
        return sum((v * terms[t] for t, v in b.items()), np.zeros_like(dT))

    signal = response(beta)
    if beta_post is not None:
        signal = np.where((growth_years >= split_year)[None, :], response(beta_post), signal)
    for t, v in (lag_beta or {}).items():
        lagged = np.zeros_like(dT)
        lagged[:, 1:] = terms[t][:, :-1]
        signal = signal + v * lagged

    alpha = rng.normal(0.01, 0.01, n_countries)
    theta = rng.normal(0.0, 0.02, len(growth_years))
    dln = alpha[:, None] + theta[None, :] + signal + noise * rng.normal(size=signal.shape)
    growth = GrowthPanel(
        pd.DataFrame(
            {
                "country": np.repeat(countries, len(growth_years)),
                "year": np.tile(growth_years, n_countries),
                "dln_tfp": dln.ravel(),
            }
        ),
        measure="tfp",
    )
    weather = pd.DataFrame(
        {
            "agg_weights": "cropland",
            "window": "green",
            "country": np.repeat(countries, len(ys)),
            "year": np.tile(ys, n_countries),
            "tmean": T.ravel(),
            "tmin": T.ravel() - 5.0,
            "tmax": T.ravel() + 5.0,
            "precip": P.ravel(),
        }
    )
    meta = CountryMeta.from_frame(
        pd.DataFrame(
            {
                "country": countries,
                "region": [REGIONS[i % n_regions] for i in range(n_countries)],
                "latitude": np.linspace(-50.0, 60.0, n_countries),
                "revenue_weight": rng.uniform(0.5, 2.0, n_countries),
            }
        )
    )
    return growth, weather, meta


def make_table(spec: ModelSpec = BASELINE, *, lags: int = 0, coverage: float = 0.9, **kwargs) -> RegTable:
    growth, weather, meta = make_inputs(**kwargs)
    return assemble_panel(growth, weather, meta, spec, lags=lags, coverage_threshold=coverage)


@pytest.fixture
def table() -> RegTable:
    return make_table()


@pytest.fixture(scope="session")
def world() -> World:
    """Noiseless six-country world."""
    return generate_world(WorldParams(n_countries=6, noise_sd=0.0, seed=3))


@pytest.fixture(scope="session")
def calm_world() -> World:
    """Four countries, no forced warming."""
    return generate_world(WorldParams(n_countries=4, trend=0.0, precip_trend=0.0, seed=5))
