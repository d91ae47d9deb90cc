"""Synthetic worlds with known truth, and a brute-force fixed-effects oracle.

A world is a block of square country tiles on a fine grid (one coarse climate
model cell per tile) with monthly weather, biweekly NDVI peaking at a chosen
month, land-cover fractions, raw climate-model runs for every experiment, and
TFP/output panels generated from the seasonal regressors the pipeline itself
computes from those grids.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.linalg
from pydantic import BaseModel, Field, field_validator

from agtfp.config import (
    BASELINE,
    BASELINE_YEARS,
    DROP_COUNTRIES,
    EXPERIMENTS,
    IMPACT_YEARS,
    PRECIP_SCALE,
    SAMPLE_YEARS,
    SPLICE_YEAR,
    WEATHER_VARS,
    AggWeights,
    Region,
    Window,
)
from agtfp.dataio import CountryMeta, TfpPanel
from agtfp.downscale import BASELINE_COLUMNS, SCENARIO_COLUMNS, ScenarioSet
from agtfp.errors import DataValidationError, NumericalError
from agtfp.gridops import CountryMask, FieldSeries, GridField, GridSpec, Variable, write_grid, write_mask
from agtfp.rng import substream
from agtfp.season import (
    BIN_MONTH,
    N_BINS,
    SeasonMap,
    bin_stamp,
    combined_weights,
    country_green_month,
    country_monthly,
    greenest_month_cell,
    ndvi_climatology,
    ndvi_stack,
    weather_variants,
)

logger = logging.getLogger(__name__)

OBS_YEARS = (1950, 2016)
NDVI_YEARS = (2001, 2005)


class WorldParams(BaseModel):
    n_countries: int = Field(default=20, ge=1)
    years: tuple[int, int] = SAMPLE_YEARS
    tile: int = Field(default=3, ge=1)
    resolution: float = Field(default=2.0, gt=0)
    beta: dict[str, float] = Field(default_factory=lambda: {"dT": -0.03, "dT2": -0.002, "dP": 0.05, "dP2": -0.05})
    output_scale: float = 1.5
    alpha_sd: float = Field(default=0.01, ge=0)
    theta_sd: float = Field(default=0.02, ge=0)
    noise_sd: float = Field(default=0.01, ge=0)
    heteroskedastic: bool = False
    shock_sd: float = Field(default=0.8, ge=0)
    precip_shock_sd: float = Field(default=0.2, ge=0)
    trend: float = 0.3  # degC per decade added to forced runs from 1961
    precip_trend: float = 0.0  # fractional change per decade in forced runs
    n_gcms: int = Field(default=2, ge=1)
    gcm_bias_t: float = 1.0
    gcm_bias_p: float = Field(default=1.2, gt=0)
    peak_months: list[int] | None = None
    seed: int = Field(default=0, ge=0)

    @field_validator("beta")
    @classmethod
    def _known_terms(cls, value: dict[str, float]) -> dict[str, float]:
        allowed = {"dT", "dT2", "dT3", "dP", "dP2", "dP3"}
        unknown = set(value) - allowed
        if unknown:
            raise ValueError(f"unknown beta terms {sorted(unknown)}")
        if not all(math.isfinite(v) for v in value.values()):
            raise ValueError("beta must be finite")
        return value

    @field_validator("peak_months")
    @classmethod
    def _months(cls, value: list[int] | None) -> list[int] | None:
        if value is not None and any(not 1 <= m <= 12 for m in value):
            raise ValueError("peak months must lie in 1-12")
        return value


@dataclass
class World:
    params: WorldParams
    fine: GridSpec
    coarse: GridSpec
    mask: CountryMask
    cropland: GridField
    pasture: GridField
    observed: dict[str, FieldSeries]
    ndvi: list[GridField]
    gcm: dict[str, dict[str, dict[str, FieldSeries]]]
    meta: CountryMeta
    season_maps: dict[str, SeasonMap]
    weather: pd.DataFrame
    tfp: TfpPanel
    output: TfpPanel
    truth: dict = field(default_factory=dict)

    @property
    def countries(self) -> list[str]:
        return list(self.mask.countries)


def country_ids(n: int) -> list[str]:
    """The drop-restriction countries first, then synthetic ids."""
    ids = list(DROP_COUNTRIES[:n])
    ids += [f"C{i:02d}" for i in range(len(ids), n)]
    return ids


def _layout(p: WorldParams) -> tuple[GridSpec, GridSpec, np.ndarray, int, int]:
    ncols = math.ceil(math.sqrt(p.n_countries))
    nrows = math.ceil(p.n_countries / ncols)
    tile_deg = p.tile * p.resolution
    lat_edge = -nrows * tile_deg / 2.0
    lon_edge = -ncols * tile_deg / 2.0
    fine = GridSpec(
        lat0=lat_edge + p.resolution / 2,
        lon0=lon_edge + p.resolution / 2,
        dlat=p.resolution,
        dlon=p.resolution,
        nlat=nrows * p.tile,
        nlon=ncols * p.tile,
    )
    coarse = GridSpec(
        lat0=lat_edge + tile_deg / 2,
        lon0=lon_edge + tile_deg / 2,
        dlat=tile_deg,
        dlon=tile_deg,
        nlat=nrows,
        nlon=ncols,
    )
    codes = np.full(fine.shape, -1, dtype=int)
    for i in range(p.n_countries):
        r, c = divmod(i, ncols)
        codes[r * p.tile : (r + 1) * p.tile, c * p.tile : (c + 1) * p.tile] = i
    return fine, coarse, codes, nrows, ncols


def _monthly_index(years: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    ys = np.repeat(np.arange(years[0], years[1] + 1), 12)
    ms = np.tile(np.arange(1, 13), years[1] - years[0] + 1)
    return ys, ms


def _weather_fields(
    p: WorldParams,
    fine: GridSpec,
    codes: np.ndarray,
    years: tuple[int, int],
    rng: np.random.Generator,
    base: dict[str, np.ndarray],
) -> dict[str, FieldSeries]:
    """Monthly fine fields: per-country climate + seasonal cycle + country-year-month shocks."""
    ys, ms = _monthly_index(years)
    nt, nc = len(ys), p.n_countries
    shock_t = rng.normal(0.0, p.shock_sd, size=(nt, nc))
    shock_p = rng.normal(0.0, p.precip_shock_sd, size=(nt, nc))
    cell_t = base["cell_t"]
    phase = 2 * np.pi * (ms[:, None] - base["t_peak"][None, :]) / 12.0
    t_country = base["t_mean"][None, :] + base["t_amp"][None, :] * np.cos(phase) + shock_t
    p_country = base["p_mean"][None, :] * (1.0 + 0.5 * np.cos(phase)) * np.exp(shock_p)

    land = codes >= 0
    safe = np.where(land, codes, 0)
    tmean = np.where(land[None], t_country[:, safe] + cell_t[None], np.nan)
    precip = np.where(land[None], p_country[:, safe] * base["cell_p"][None], np.nan)
    return {
        "tmean": FieldSeries(fine, Variable.tmean, ys, ms, tmean),
        "tmin": FieldSeries(fine, Variable.tmin, ys, ms, tmean - base["dtr"]),
        "tmax": FieldSeries(fine, Variable.tmax, ys, ms, tmean + base["dtr"]),
        "precip": FieldSeries(fine, Variable.precip, ys, ms, precip),
    }


def _ndvi(fine: GridSpec, codes: np.ndarray, peaks: np.ndarray) -> list[GridField]:
    """Truncated cosines over the 24 bins, peaking at the first bin of each country's month."""
    peak_bin = np.array([int(np.flatnonzero(BIN_MONTH == m)[0]) for m in peaks])
    land = codes >= 0
    out = []
    for year in range(NDVI_YEARS[0], NDVI_YEARS[1] + 1):
        for b in range(N_BINS):
            shape = np.maximum(0.0, np.cos(2 * np.pi * (b - peak_bin) / N_BINS))
            values = np.where(land, 0.2 + 0.6 * shape[np.where(land, codes, 0)], np.nan)
            out.append(GridField(fine, values, Variable.ndvi, bin_stamp(year, b + 1)))
    return out


def _gcm_runs(
    p: WorldParams,
    coarse: GridSpec,
    coarse_codes: np.ndarray,
    base: dict[str, np.ndarray],
) -> dict[str, dict[str, dict[str, FieldSeries]]]:
    """Raw coarse runs; forced and unforced runs share internal variability."""
    runs: dict[str, dict[str, dict[str, FieldSeries]]] = {}
    cbase = {
        "cell_t": np.zeros(coarse.shape),
        "cell_p": np.ones(coarse.shape),
        **{k: base[k] for k in ("t_mean", "t_amp", "t_peak", "p_mean", "dtr")},
    }
    for g in range(p.n_gcms):
        gcm = f"GCM{g + 1}"
        rng = substream(p.seed, "gcm", g)
        full = _weather_fields(p, coarse, coarse_codes, (OBS_YEARS[0], IMPACT_YEARS[1]), rng, cbase)
        years = full["tmean"].years
        warming = p.trend * np.maximum(0, years - SAMPLE_YEARS[0]) / 10.0
        wetting = 1.0 + p.precip_trend * np.maximum(0, years - SAMPLE_YEARS[0]) / 10.0
        forced = {}
        for var, s in full.items():
            if var == "precip":
                values = s.values * p.gcm_bias_p
                forced[var] = values * wetting[:, None, None]
            else:
                values = s.values + p.gcm_bias_t
                forced[var] = values + warming[:, None, None]
            full[var] = FieldSeries(s.spec, s.variable, s.years, s.months, values)
        hist = years <= SPLICE_YEAR
        runs[gcm] = {
            "hist-nat": full,
            "historical": {
                v: FieldSeries(s.spec, s.variable, s.years[hist], s.months[hist], forced[v][hist]) for v, s in full.items()
            },
            "ssp245": {
                v: FieldSeries(s.spec, s.variable, s.years[~hist], s.months[~hist], forced[v][~hist]) for v, s in full.items()
            },
        }
    return runs


def regressors(weather: pd.DataFrame, agg: str = BASELINE.agg_weights.value, window: str = BASELINE.window.value) -> pd.DataFrame:
    """Year-on-year changes (and powers) of seasonal tmean and precipitation (1,000 mm)."""
    w = weather[(weather["agg_weights"] == agg) & (weather["window"] == window)]
    w = w.sort_values(["country", "year"]).set_index(["country", "year"])
    out = pd.DataFrame(index=w.index)
    year = pd.Series(w.index.get_level_values("year"), index=w.index)
    consecutive = (year - year.groupby(level="country").shift(1)) == 1
    for name, col, scale in (("T", "tmean", 1.0), ("P", "precip", PRECIP_SCALE)):
        level = w[col] / scale
        d = (level - level.groupby(level="country").shift(1)).where(consecutive)
        for k in (1, 2, 3):
            out[f"d{name}{k if k > 1 else ''}"] = d**k
    return out.reset_index()


def generate_world(p: WorldParams | None = None) -> World:
    p = p or WorldParams()
    rng = substream(p.seed, "world")
    fine, coarse, codes, nrows, ncols = _layout(p)
    countries = country_ids(p.n_countries)
    mask = CountryMask(fine, codes, tuple(countries))
    nc = p.n_countries

    base = {
        "t_mean": rng.uniform(5.0, 28.0, nc),
        "t_amp": rng.uniform(2.0, 10.0, nc),
        "t_peak": rng.integers(1, 13, nc).astype(float),
        "p_mean": rng.uniform(30.0, 150.0, nc),
        "dtr": rng.uniform(3.0, 7.0, nc).mean(),
        "cell_t": rng.normal(0.0, 0.3, fine.shape),
        "cell_p": rng.uniform(0.8, 1.2, fine.shape),
    }
    observed = _weather_fields(p, fine, codes, OBS_YEARS, substream(p.seed, "observed"), base)
    peaks = np.array(p.peak_months if p.peak_months is not None else rng.integers(1, 13, nc))
    if len(peaks) != nc:
        raise DataValidationError(f"need {nc} peak months, got {len(peaks)}")
    ndvi = _ndvi(fine, codes, peaks)

    land = codes >= 0
    cropland = GridField(fine, np.where(land, rng.uniform(0.1, 0.9, fine.shape), np.nan), Variable.weight)
    pasture = GridField(fine, np.where(land, rng.uniform(0.0, 0.5, fine.shape), np.nan), Variable.weight)

    coarse_codes = np.arange(nrows * ncols).reshape(nrows, ncols)
    coarse_codes = np.where(coarse_codes < nc, coarse_codes, -1)
    gcm = _gcm_runs(p, coarse, coarse_codes, base)

    region_tokens = list(Region)
    lats = np.array([fine.lats[np.any(codes == i, axis=1)].mean() for i in range(nc)])
    meta = CountryMeta.from_frame(
        pd.DataFrame(
            {
                "country": countries,
                "region": [region_tokens[i % len(region_tokens)].value for i in range(nc)],
                "latitude": lats,
                "revenue_weight": rng.uniform(0.5, 2.0, nc),
            }
        )
    )

    spec_ndvi, stack = ndvi_stack(ndvi)
    cell_months = greenest_month_cell(ndvi_climatology(spec_ndvi, stack))
    weights = {agg.value: combined_weights(cropland, pasture, agg) for agg in AggWeights}
    season_maps = {agg: country_green_month(cell_months, w, mask) for agg, w in weights.items()}
    monthly = {agg: country_monthly(observed, w, mask) for agg, w in weights.items()}
    weather = weather_variants(monthly, season_maps)

    tfp, output, truth = _panels(p, weather, countries)
    truth["peak_months"] = {c: int(m) for c, m in zip(countries, peaks)}
    logger.info("generated world: %d countries, fine grid %dx%d", nc, *fine.shape)
    return World(
        params=p,
        fine=fine,
        coarse=coarse,
        mask=mask,
        cropland=cropland,
        pasture=pasture,
        observed=observed,
        ndvi=ndvi,
        gcm=gcm,
        meta=meta,
        season_maps=season_maps,
        weather=weather,
        tfp=tfp,
        output=output,
        truth=truth,
    )


def _panels(p: WorldParams, weather: pd.DataFrame, countries: list[str]) -> tuple[TfpPanel, TfpPanel, dict]:
    """TFP and output log-level panels from the baseline seasonal regressors."""
    rng = substream(p.seed, "panel")
    lo, hi = p.years
    growth_years = np.arange(lo + 1, hi + 1)
    x = regressors(weather).set_index(["country", "year"])
    idx = pd.MultiIndex.from_product([countries, growth_years], names=["country", "year"])
    x = x.reindex(idx)
    terms = list(p.beta)
    if x[terms].isna().any().any():
        raise DataValidationError("synthetic weather does not cover every growth year")
    signal = x[terms].to_numpy() @ np.array([p.beta[t] for t in terms])

    alpha = pd.Series(rng.normal(0.01, p.alpha_sd, len(countries)), index=countries)
    theta = pd.Series(rng.normal(0.0, p.theta_sd, len(growth_years)), index=growth_years)
    scale = rng.uniform(0.5, 2.0, len(countries)) if p.heteroskedastic else np.ones(len(countries))
    fe = alpha.reindex(idx.get_level_values("country")).to_numpy() + theta.reindex(idx.get_level_values("year")).to_numpy()
    sd = np.repeat(scale, len(growth_years)) * p.noise_sd
    panels = []
    for k, mult in enumerate((1.0, p.output_scale)):
        eps = substream(p.seed, "noise", k).normal(0.0, 1.0, len(idx)) * sd
        dln = fe + mult * signal + eps
        frame = pd.DataFrame({"country": idx.get_level_values("country"), "year": idx.get_level_values("year"), "dln": dln})
        levels = frame.groupby("country")["dln"].cumsum()
        first = pd.DataFrame({"country": countries, "year": lo, "ln_tfp": 0.0})
        frame = pd.concat([first, frame.assign(ln_tfp=levels)[["country", "year", "ln_tfp"]]], ignore_index=True)
        frame = frame.sort_values(["country", "year"], kind="mergesort").reset_index(drop=True)
        panels.append(TfpPanel(frame, measure="tfp" if k == 0 else "output"))
    truth = {
        "beta": dict(p.beta),
        "beta_output": {t: v * p.output_scale for t, v in p.beta.items()},
        "alpha": alpha.to_dict(),
        "theta": {int(y): float(v) for y, v in theta.items()},
    }
    return panels[0], panels[1], truth


# ---------------------------------------------------------------------------
# Country-level scenarios
# ---------------------------------------------------------------------------


def direct_scenarios(world: World, *, trend: float | None = None, precip_trend: float | None = None) -> ScenarioSet:
    """Seasonal with/without trajectories built at country level, skipping gridded downscaling.

    Without-ACC is the observed-like seasonal climate plus GCM-specific shocks;
    with-ACC adds the warming trend to every temperature variable exactly.
    """
    p = world.params
    trend = p.trend if trend is None else trend
    precip_trend = p.precip_trend if precip_trend is None else precip_trend
    years = np.arange(BASELINE_YEARS[0], IMPACT_YEARS[1] + 1)
    clim = world.weather.groupby(["agg_weights", "window", "country"])[list(WEATHER_VARS)].mean()
    frames = []
    for g in range(p.n_gcms):
        gcm = f"GCM{g + 1}"
        rng = substream(p.seed, "direct", g)
        shocks_t = rng.normal(0.0, 0.5, (len(world.countries), len(years)))
        shocks_p = rng.normal(0.0, 0.1, (len(world.countries), len(years)))
        warming = trend * np.maximum(0, years - SAMPLE_YEARS[0]) / 10.0
        wetting = 1.0 + precip_trend * np.maximum(0, years - SAMPLE_YEARS[0]) / 10.0
        for (agg, window, country), row in clim.iterrows():
            ci = world.countries.index(country)
            without = {v: row[v] + shocks_t[ci] for v in ("tmean", "tmin", "tmax")}
            without["precip"] = row["precip"] * np.exp(shocks_p[ci])
            with_acc = {v: without[v] + warming for v in ("tmean", "tmin", "tmax")}
            with_acc["precip"] = without["precip"] * wetting
            for label, values in (("with", with_acc), ("without", without)):
                frames.append(
                    pd.DataFrame(
                        {"agg_weights": agg, "window": window, "gcm": gcm, "scenario": label, "country": country, "year": years, **values}
                    )
                )
    frame = pd.concat(frames, ignore_index=True)
    base = frame[(frame["scenario"] == "without") & frame["year"].between(*BASELINE_YEARS)]
    baseline = base.groupby(["agg_weights", "window", "gcm", "country"])[list(WEATHER_VARS)].mean().reset_index()
    baseline.insert(4, "first_year", BASELINE_YEARS[0])
    baseline.insert(5, "last_year", BASELINE_YEARS[1])
    traj = frame[frame["year"] >= SAMPLE_YEARS[0]].reindex(columns=SCENARIO_COLUMNS)
    traj = traj.sort_values(["agg_weights", "window", "gcm", "scenario", "country", "year"], kind="mergesort")
    return ScenarioSet(traj.reset_index(drop=True), baseline.reindex(columns=BASELINE_COLUMNS))


def analytic_linear_impact(beta_t: float, trend: float, first: int = SAMPLE_YEARS[0] + 1, last: int = IMPACT_YEARS[1]) -> float:
    """Terminal impact of a linear temperature response under a linear warming trend."""
    years = np.arange(first, last + 1)
    return float(beta_t * np.sum(trend * (years - SAMPLE_YEARS[0]) / 10.0))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_bundle(world: World, out_dir: str | Path, *, seed: int = 0) -> dict[str, Path]:
    """Write the world in the pipeline's input formats, a truth manifest and a run config."""
    out = Path(out_dir)
    grids = out / "grids"
    grids.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    paths["tfp"] = _write_index(world.tfp, out / "tfp.csv", "tfp_index")
    paths["output"] = _write_index(world.output, out / "output.csv", "output_index")
    meta = world.meta.frame.reset_index()
    meta.to_csv(out / "meta.csv", index=False, float_format="%.17g")
    paths["meta"] = out / "meta.csv"
    world.weather.to_csv(out / "weather.csv", index=False, float_format="%.17g")
    paths["weather"] = out / "weather.csv"
    paths["season_map"] = world.season_maps[AggWeights.cropland.value].to_csv(out / "season_map.csv")

    observed = grids / "observed"
    observed.mkdir(exist_ok=True)
    for var, s in world.observed.items():
        write_grid(observed / f"{var}.grid", s.fields())
    paths["observed"] = observed
    paths["ndvi"] = write_grid(grids / "ndvi.grid", world.ndvi)
    paths["cropland"] = write_grid(grids / "cropland.grid", world.cropland)
    paths["pasture"] = write_grid(grids / "pasture.grid", world.pasture)
    write_mask(grids / "mask.grid", grids / "mask_legend.csv", world.mask)
    paths["mask"], paths["mask_legend"] = grids / "mask.grid", grids / "mask_legend.csv"

    members = []
    for gcm, exps in world.gcm.items():
        files: dict[str, dict[str, list[str]]] = {}
        for exp in EXPERIMENTS:
            files[exp] = {}
            for var, s in exps[exp].items():
                p = write_grid(grids / "gcm" / f"{gcm}_{exp}_{var}.grid", s.fields())
                files[exp][var] = [str(p.relative_to(out))]
        members.append({"gcm": gcm, "files": files})
    (out / "scenario_manifest.json").write_text(json.dumps({"members": members}, indent=2))
    paths["scenario_manifest"] = out / "scenario_manifest.json"

    scen = direct_scenarios(world)
    scen.to_csv(out / "scenarios.csv", out / "baseline.csv")
    paths["scenarios"], paths["baseline"] = out / "scenarios.csv", out / "baseline.csv"

    truth = {"params": world.params.model_dump(mode="json"), **_jsonable(world.truth)}
    (out / "manifest.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    config = {k: str(v.relative_to(out)) for k, v in paths.items()}
    config.update({"seed": seed, "out": "out"})
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    paths["config"] = out / "config.json"
    return paths


def _write_index(panel: TfpPanel, path: Path, column: str) -> Path:
    df = panel.frame.assign(**{column: 100.0 * np.exp(panel.frame["ln_tfp"])})[["country", "year", column]]
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


def oracle_fe_ols(
    X: np.ndarray,
    y: np.ndarray,
    country: np.ndarray,
    year: np.ndarray,
    w: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted least squares with explicit country and year dummies (dense normal equations)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(y)
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    c_codes, c_labels = pd.factorize(np.asarray(country), sort=True)
    t_codes, t_labels = pd.factorize(np.asarray(year), sort=True)
    Dc = np.zeros((n, len(c_labels)))
    Dc[np.arange(n), c_codes] = 1.0
    Dt = np.zeros((n, len(t_labels)))
    Dt[np.arange(n), t_codes] = 1.0
    Z = np.hstack([X, Dc, Dt[:, 1:]])
    A = Z.T @ (w[:, None] * Z)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise NumericalError("dummy-variable system is singular")
    try:
        coef = scipy.linalg.solve(A, Z.T @ (w * np.asarray(y, dtype=float)), assume_a="sym")
    except scipy.linalg.LinAlgError as e:
        raise NumericalError(f"dummy-variable system is singular: {e}")
    return coef[: X.shape[1]]
