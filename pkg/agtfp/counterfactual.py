"""Cumulative impacts of anthropogenic climate change on TFP and counterfactual levels.

Impacts are running sums, from 1962, of the response terms evaluated at each
scenario's seasonal anomalies against the unforced 1950-1972 baseline; the
ACC impact is the with-forcing sum minus the without-forcing sum. Impacts are
carried in log points and only converted to percent after aggregation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from agtfp.config import IMPACT_YEARS, LEVEL_BASE, PRECIP_SCALE, PROJECTION_WINDOW, REGION_NAMES, SAMPLE_YEARS, WORLD, Hetero, ModelSpec
from agtfp.dataio import CountryMeta, GrowthPanel
from agtfp.downscale import ScenarioSet
from agtfp.econ import weather_terms
from agtfp.errors import DataValidationError
from agtfp.inference import BootstrapEnsemble
from agtfp.rng import substream

logger = logging.getLogger(__name__)

START_YEAR = SAMPLE_YEARS[0]  # impact paths are zero here by convention
END_YEAR = IMPACT_YEARS[1]
YEARS = np.arange(START_YEAR, END_YEAR + 1)


def pct(log_points: np.ndarray | float) -> np.ndarray | float:
    return 100.0 * np.expm1(log_points)


# ---------------------------------------------------------------------------
# Anomalies and single paths
# ---------------------------------------------------------------------------


def scenario_anomalies(ss: ScenarioSet, spec: ModelSpec) -> pd.DataFrame:
    """Per GCM, scenario, country and year: anomaly powers against the unforced baseline.

    Columns follow the regression terms (``dT``, ``dT2``, ... ``dP``, ``dP2`` ...),
    with precipitation in 1,000 mm.
    """
    if "agg_weights" in ss.frame.columns:
        ss = ss.variant(*spec.weather_key)
    frame, base = ss.frame, ss.baseline
    tcol = spec.tvar.value
    keys = ["gcm", "country"]
    merged = frame.merge(base[keys + [tcol, "precip"]], on=keys, how="left", suffixes=("", "_base"))
    missing = merged[f"{tcol}_base"].isna()
    if missing.any():
        pairs = merged.loc[missing, keys].drop_duplicates().itertuples(index=False)
        raise DataValidationError(f"no baseline climatology for {[tuple(p) for p in pairs][:10]}")

    out = merged[["gcm", "scenario", "country", "year"]].copy()
    anomalies = {"T": merged[tcol] - merged[f"{tcol}_base"]}
    if any(t.startswith("dP") for t in weather_terms(spec)):
        anomalies["P"] = (merged["precip"] - merged["precip_base"]) / PRECIP_SCALE
    for var, a in anomalies.items():
        for p in range(1, spec.degree + 1):
            out[f"d{var}{p if p > 1 else ''}"] = a**p
    return out.reset_index(drop=True)


def cumulative_impact(beta: pd.Series, anomalies: pd.DataFrame) -> pd.Series:
    """Running sum from 1962 of sum_k beta_k * anomaly_k, indexed by year (0 in 1961)."""
    terms = [t for t in beta.index if t in anomalies.columns]
    a = anomalies.set_index("year").sort_index()
    a = a[a.index > START_YEAR]
    contrib = a[terms].to_numpy() @ beta[terms].to_numpy()
    path = pd.Series(np.cumsum(contrib), index=a.index, dtype=float)
    return pd.concat([pd.Series([0.0], index=[START_YEAR]), path]).rename_axis("year")


def impact_path(beta: pd.Series, with_acc: pd.DataFrame, without_acc: pd.DataFrame) -> pd.DataFrame:
    """Both cumulative paths of one country and their difference."""
    i_with = cumulative_impact(beta, with_acc)
    i_without = cumulative_impact(beta, without_acc)
    if not i_with.index.equals(i_without.index):
        raise DataValidationError("with and without scenarios cover different years")
    return pd.DataFrame({"I_with": i_with, "I_without": i_without, "impact": i_with - i_without})


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


@dataclass
class ImpactEnsemble:
    """ACC impact (log points) per member, country and year 1961-2020."""

    impacts: np.ndarray  # (n, countries, years)
    countries: list[str]
    years: np.ndarray
    members: pd.DataFrame  # member_id, draw_id, gcm
    seed: int = 0

    @property
    def n(self) -> int:
        return self.impacts.shape[0]

    def country_mean(self) -> pd.DataFrame:
        return pd.DataFrame(self.impacts.mean(axis=0), index=self.countries, columns=self.years)


def _cumulative_differences(anoms: pd.DataFrame, terms: list[str], countries: list[str]) -> np.ndarray:
    """(countries, years, terms) running sums from 1962 of with-minus-without anomaly terms."""
    wide = anoms.set_index(["scenario", "country", "year"])[terms]
    out = np.zeros((len(countries), len(YEARS), len(terms)))
    for ci, c in enumerate(countries):
        w = wide.loc[("with", c)].reindex(YEARS[1:])
        wo = wide.loc[("without", c)].reindex(YEARS[1:])
        diff = (w - wo).to_numpy()
        if np.isnan(diff).any():
            missing = YEARS[1:][np.isnan(diff).any(axis=1)]
            raise DataValidationError(f"scenario anomalies for {c} missing in years {missing[:10].tolist()}")
        out[ci, 1:] = np.cumsum(diff, axis=0)
    return out


def ensemble_impacts(
    ensemble: BootstrapEnsemble,
    scenarios: ScenarioSet,
    spec: ModelSpec,
    n: int = 2000,
    seed: int = 0,
    *,
    groups: pd.Series | None = None,
    countries: list[str] | None = None,
) -> ImpactEnsemble:
    """ACC impact paths for ``n`` (bootstrap draw, GCM) pairs drawn uniformly and independently.

    ``groups`` maps country to latitude group for lat3 fits.
    """
    anoms = scenario_anomalies(scenarios, spec)
    terms = weather_terms(spec)
    available = sorted(anoms["country"].unique())
    countries = available if countries is None else [c for c in countries if c in set(available)]
    if not countries:
        raise DataValidationError("no country has scenario anomalies")
    gcms = sorted(anoms["gcm"].unique())
    if ensemble.B == 0 or not gcms:
        raise DataValidationError("impact ensemble needs at least one bootstrap draw and one GCM")
    lat3 = spec.hetero == Hetero.lat3
    if lat3 and groups is None:
        raise DataValidationError("lat3 impacts need the country latitude groups")

    D = {g: _cumulative_differences(anoms[anoms["gcm"] == g], terms, countries) for g in gcms}

    rng = substream(seed, "ensemble")
    draw_idx = rng.integers(0, ensemble.B, size=n)
    gcm_idx = rng.integers(0, len(gcms), size=n)

    # coefficient of each (country, term) for every bootstrap draw
    if lat3:
        g_of = groups.reindex(countries).to_numpy()
        if np.isnan(g_of.astype(float)).any():
            raise DataValidationError("latitude group missing for some countries")
        cols = [[f"{t}@g{int(g)}" for t in terms] for g in g_of]
        betas = np.stack([ensemble.draws[c].to_numpy() for c in cols], axis=1)  # (B, countries, terms)
    else:
        betas = np.broadcast_to(ensemble.draws[terms].to_numpy()[:, None, :], (ensemble.B, len(countries), len(terms)))

    impacts = np.empty((n, len(countries), len(YEARS)))
    for gi, g in enumerate(gcms):
        sel = np.flatnonzero(gcm_idx == gi)
        if len(sel):
            impacts[sel] = np.einsum("cyk,mck->mcy", D[g], betas[draw_idx[sel]])
    members = pd.DataFrame({"member_id": np.arange(n), "draw_id": draw_idx, "gcm": [gcms[i] for i in gcm_idx]})
    logger.info("impact ensemble: %d members over %d draws and %d GCMs", n, ensemble.B, len(gcms))
    return ImpactEnsemble(impacts=impacts, countries=countries, years=YEARS.copy(), members=members, seed=seed)


def aggregate_regions(ie: ImpactEnsemble, meta: CountryMeta) -> dict[str, np.ndarray]:
    """Revenue-weighted mean impact per region and for the world, (n, years) each."""
    missing = [c for c in ie.countries if c not in meta.countries]
    if missing:
        raise DataValidationError(f"no revenue weights for {missing}")
    w = meta.weights(ie.countries).to_numpy()
    regions = np.array([meta.region(c) for c in ie.countries])
    out: dict[str, np.ndarray] = {}
    for name, sel in [(r, regions == r) for r in sorted(set(regions))] + [(WORLD, np.ones(len(regions), bool))]:
        total = w[sel].sum()
        if total <= 0:
            raise DataValidationError(f"zero total revenue weight in {name}")
        out[name] = np.einsum("c,ncy->ny", w[sel] / total, ie.impacts[:, sel])
    return out


# ---------------------------------------------------------------------------
# Levels
# ---------------------------------------------------------------------------


@dataclass
class LevelPaths:
    """Observed/projected and counterfactual levels (base 100 in 1962 or a late starter's first year)."""

    observed: pd.DataFrame  # index unit, columns years 1962-2020
    counterfactual: dict[str, np.ndarray]  # unit -> (n, years)
    years: np.ndarray
    short_history: list[tuple[str, int]] = field(default_factory=list)


def _projected_growth(growth: GrowthPanel, countries: list[str], log: list[tuple[str, int]] | None = None) -> pd.DataFrame:
    """Observed growth over 1962-2020 per country, NaN before its first observation.

    Years after a country's last observation are filled with its mean growth
    over 2006-2015; gaps between the first and last observation are an error.
    """
    g = growth.frame.pivot(index="country", columns="year", values="dln_tfp").reindex(countries)
    g = g.reindex(columns=YEARS[1:])
    observed = g.notna().to_numpy()
    lo, hi = PROJECTION_WINDOW
    window = g.loc[:, lo:hi]
    for i, c in enumerate(g.index):
        seen = np.flatnonzero(observed[i])
        if not len(seen):
            raise DataValidationError(f"no observed growth for {c}")
        first, last = int(seen[0]), int(seen[-1])
        if not observed[i, first : last + 1].all():
            raise DataValidationError(f"observed growth for {c} has gaps between {YEARS[1 + first]} and {YEARS[1 + last]}")
        k = int(window.loc[c].notna().sum())
        if k == 0:
            raise DataValidationError(f"no growth for {c} within {lo}-{hi} to project from")
        if k < hi - lo + 1:
            logger.info("projection for %s uses %d years of history", c, k)
            if log is not None:
                log.append((c, k))
        g.iloc[i, last + 1 :] = float(window.loc[c].mean())
    return g


def _cumulate(growth: np.ndarray) -> np.ndarray:
    """Running sums over 1962-2020 rows; 0 in the year before each row's first growth, NaN earlier."""
    growth = np.atleast_2d(growth)
    cum = np.full((growth.shape[0], growth.shape[1] + 1), np.nan)
    for i, row in enumerate(growth):
        seen = np.flatnonzero(~np.isnan(row))
        if len(seen):
            first = int(seen[0])
            cum[i, first] = 0.0
            cum[i, first + 1 :] = np.cumsum(row[first:])
    return cum


def observed_log_path(growth: GrowthPanel, countries: list[str], log: list[tuple[str, int]] | None = None) -> pd.DataFrame:
    """Cumulative observed log growth projected to 2020.

    The path is 0 in the year before a country's first growth observation (1961
    for a full panel) and NaN before that.
    """
    g = _projected_growth(growth, countries, log)
    return pd.DataFrame(_cumulate(g.to_numpy()), index=g.index, columns=YEARS)


def _regional_growth(growth: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Revenue-weighted mean growth per year over the countries observed that year."""
    present = ~np.isnan(growth)
    w = np.where(present, weights[:, None], 0.0)
    total = w.sum(axis=0)
    num = (w * np.where(present, growth, 0.0)).sum(axis=0)
    return np.divide(num, total, out=np.full(growth.shape[1], np.nan), where=total > 0)


def project_and_level(
    growth: GrowthPanel,
    ie: ImpactEnsemble,
    meta: CountryMeta | None = None,
    regional: dict[str, np.ndarray] | None = None,
) -> LevelPaths:
    """Levels L = exp(observed cumulative growth - ACC impact), normalized so the observed
    level is 100 in the first impact year, or in a late starter's first observed year.

    Counterfactual paths share the observed normalization, so ln(L_cf / L_obs) is
    the negative impact in every year. When ``meta`` and ``regional`` are given,
    regions and the world cumulate the revenue-weighted growth of the countries
    observed in each year.
    """
    short: list[tuple[str, int]] = []
    g = _projected_growth(growth, ie.countries, short)
    cum = _cumulate(g.to_numpy())
    paths = {c: (cum[i], ie.impacts[:, i]) for i, c in enumerate(ie.countries)}
    if regional is not None:
        if meta is None:
            raise DataValidationError("regional levels need country metadata")
        w = meta.weights(ie.countries).to_numpy()
        regions = np.array([meta.region(c) for c in ie.countries])
        for name, imp in regional.items():
            sel = np.ones(len(regions), bool) if name == WORLD else regions == name
            paths[name] = (_cumulate(_regional_growth(g.to_numpy()[sel], w[sel]))[0], imp)

    years = ie.years
    first_impact = 1  # index of 1962
    observed, counterfactual = {}, {}
    for unit, (obs, imp) in paths.items():
        base = max(first_impact, int(np.flatnonzero(~np.isnan(obs))[0]))
        rel = obs - obs[base]
        observed[unit] = LEVEL_BASE * np.exp(rel)
        counterfactual[unit] = LEVEL_BASE * np.exp(rel[None, :] - imp)
    obs_frame = pd.DataFrame(observed, index=years).T
    return LevelPaths(
        observed=obs_frame.loc[:, years[first_impact]:],
        counterfactual={u: v[:, first_impact:] for u, v in counterfactual.items()},
        years=years[first_impact:],
        short_history=short,
    )


def years_lost(observed_2020: float, counterfactual: np.ndarray, years: np.ndarray) -> float:
    """Years between 2020 and the first year the counterfactual reaches the observed 2020 level.

    Linear interpolation between bracketing years; ``inf`` when it never does.
    """
    path = np.asarray(counterfactual, dtype=float)
    reached = np.flatnonzero(path >= observed_2020)
    if not len(reached):
        return float("inf")
    k = int(reached[0])
    if k == 0:
        crossing = float(years[0])
    else:
        lo, hi = path[k - 1], path[k]
        crossing = float(years[k - 1]) + (observed_2020 - lo) / (hi - lo)
        if k < len(path) - 1 and (np.diff(path[k - 1 :]) < 0).any():
            logger.debug("counterfactual path not monotone after the crossing at %.2f; earliest crossing used", crossing)
    return float(years[-1]) - crossing


def years_lost_ensemble(levels: LevelPaths, unit: str = WORLD) -> np.ndarray:
    target = float(levels.observed.loc[unit].iloc[-1])
    return np.array([years_lost(target, member, levels.years) for member in levels.counterfactual[unit]])


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def _quantiles(values: np.ndarray, axis: int = 0) -> dict[str, np.ndarray]:
    return {
        "ci90_lo": np.quantile(values, 0.05, axis=axis),
        "ci90_hi": np.quantile(values, 0.95, axis=axis),
        "ci95_lo": np.quantile(values, 0.025, axis=axis),
        "ci95_hi": np.quantile(values, 0.975, axis=axis),
    }


_NEVER = 1e9


def format_years_lost(value: float) -> str | float:
    if np.isinf(value):
        return f">{END_YEAR - START_YEAR - 1} years"
    return round(float(value), 3)


@dataclass
class ImpactSummary:
    paths: pd.DataFrame  # unit, year, mean_pct, CIs (pct)
    regional_2020: pd.DataFrame
    countries_2020: pd.DataFrame
    headline: dict


def impact_summary(
    ie: ImpactEnsemble,
    regional: dict[str, np.ndarray],
    levels: LevelPaths | None = None,
) -> ImpactSummary:
    """Per-year mean and percentile bands (percent) per aggregate, 2020 tables and headline."""
    rows = []
    for unit, imp in regional.items():
        q = _quantiles(pct(imp))
        rows.append(pd.DataFrame({"unit": unit, "year": ie.years, "mean_pct": pct(imp.mean(axis=0)), **q}))
    paths = pd.concat(rows, ignore_index=True)

    last = paths[paths["year"] == END_YEAR].drop(columns="year").reset_index(drop=True)
    last.insert(1, "name", [_region_name(u) for u in last["unit"]])

    country_mean = ie.impacts[:, :, -1].mean(axis=0)
    countries = pd.DataFrame({"country": ie.countries, "impact_log": country_mean, "mean_pct": pct(country_mean)})

    world = regional[WORLD][:, -1]
    headline = {
        "year": END_YEAR,
        "global_mean_pct": float(pct(regional[WORLD].mean(axis=0)[-1])),
        "global_ci90_pct": [float(np.quantile(pct(world), 0.05)), float(np.quantile(pct(world), 0.95))],
        "global_ci95_pct": [float(np.quantile(pct(world), 0.025)), float(np.quantile(pct(world), 0.975))],
        "n_members": ie.n,
        "seed": ie.seed,
    }
    if levels is not None and WORLD in levels.counterfactual:
        lost = years_lost_ensemble(levels, WORLD)
        # order statistics of a sample holding inf would interpolate to nan
        finite = np.where(np.isinf(lost), _NEVER, lost)
        bounds = [float(np.quantile(finite, q)) for q in (0.05, 0.95)]
        headline["years_lost_mean"] = format_years_lost(float(np.mean(lost)))
        headline["years_lost_ci90"] = [format_years_lost(np.inf if b >= _NEVER else b) for b in bounds]
    return ImpactSummary(paths=paths, regional_2020=last, countries_2020=countries, headline=headline)


def _region_name(unit: str) -> str:
    if unit == WORLD:
        return "World"
    for region, name in REGION_NAMES.items():
        if region.value == unit:
            return name
    return unit
