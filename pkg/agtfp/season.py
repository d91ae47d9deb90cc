"""Green-season identification from NDVI and seasonal aggregation of monthly weather."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d

from agtfp.config import WEATHER_VARS, AggWeights, Window
from agtfp.errors import DataValidationError, DomainError
from agtfp.gridops import CountryMask, FieldSeries, GridField, GridSpec, Variable, ZonalReport, zonal_aggregate

logger = logging.getLogger(__name__)

N_BINS = 24
SMOOTH_BINS = 7  # 14 weeks of biweekly bins
GREEN_HALF_WIDTH = 2  # five months centered on the greenest month

_MONTH_ENDS = np.cumsum([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])
# month of each biweekly bin, from the calendar position of the bin midpoint
BIN_MONTH = np.searchsorted(_MONTH_ENDS, (np.arange(N_BINS) + 0.5) * 365.0 / N_BINS, side="right") + 1


# ---------------------------------------------------------------------------
# NDVI climatology
# ---------------------------------------------------------------------------


def bin_stamp(year: int, b: int) -> str:
    return f"{int(year):04d}-b{int(b):02d}"


@dataclass(frozen=True)
class NdviClim:
    spec: GridSpec
    values: np.ndarray  # (24, nlat, nlon), NaN where a cell has no data

    def __post_init__(self) -> None:
        if self.values.shape != (N_BINS, *self.spec.shape):
            raise DataValidationError(f"NDVI climatology needs {N_BINS} bins, got shape {self.values.shape}")


def ndvi_stack(fields: Sequence[GridField]) -> tuple[GridSpec, np.ndarray]:
    """Arrange biweekly NDVI records (stamps ``YYYY-bNN``) as (years, 24, nlat, nlon)."""
    if not fields:
        raise DataValidationError("no NDVI records")
    spec = fields[0].spec
    parsed = []
    for f in fields:
        if f.variable != Variable.ndvi or not f.spec.same_as(spec):
            raise DataValidationError("NDVI records must share one grid and carry the ndvi tag")
        try:
            year, b = f.stamp.split("-b")
            parsed.append((int(year), int(b), f.values))
        except ValueError:
            raise DataValidationError(f"bad NDVI stamp {f.stamp!r}; expected YYYY-bNN")
    years = sorted({y for y, _, _ in parsed})
    out = np.full((len(years), N_BINS, *spec.shape), np.nan)
    for y, b, values in parsed:
        if not 1 <= b <= N_BINS:
            raise DataValidationError(f"NDVI bin {b} outside 1-{N_BINS}")
        out[years.index(y), b - 1] = values
    return spec, out


def ndvi_climatology(spec: GridSpec, series: np.ndarray) -> NdviClim:
    """Multi-year mean per bin, then a centered circular 7-bin moving average."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 4 or series.shape[1] != N_BINS or series.shape[0] < 1:
        raise DataValidationError(f"NDVI series must be (years, {N_BINS}, nlat, nlon), got {series.shape}")
    valid = np.isfinite(series)
    count = valid.sum(axis=0).astype(float)
    total = np.where(valid, series, 0.0).sum(axis=0)
    # smooth sums and counts separately so bins missing in every year do not poison neighbors
    s_total = uniform_filter1d(total, size=SMOOTH_BINS, axis=0, mode="wrap")
    s_count = uniform_filter1d(count, size=SMOOTH_BINS, axis=0, mode="wrap")
    with np.errstate(invalid="ignore", divide="ignore"):
        clim = np.where(s_count > 0, s_total / s_count, np.nan)
    clim[:, count.sum(axis=0) == 0] = np.nan
    return NdviClim(spec, clim)


def greenest_month_cell(clim: NdviClim, tol: float = 1e-12) -> np.ndarray:
    """Calendar month (1-12) of the NDVI peak per cell; 0 where the cell is missing.

    Bins within ``tol`` of the peak count as tied and the earliest wins.
    """
    v = clim.values
    missing = np.isnan(v).all(axis=0)
    peak = np.nanmax(np.where(np.isnan(v), -np.inf, v), axis=0)
    near = v >= (peak - tol * np.maximum(1.0, np.abs(peak)))[None]
    first = np.argmax(near, axis=0)
    months = BIN_MONTH[first]
    return np.where(missing, 0, months)


# ---------------------------------------------------------------------------
# Country season map
# ---------------------------------------------------------------------------


@dataclass
class SeasonMap:
    months: dict[str, int]
    source: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, country: str) -> int:
        return self.months[country]

    def __contains__(self, country: object) -> bool:
        return country in self.months

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"country": list(self.months), "greenest_month": [int(m) for m in self.months.values()]}
        ).sort_values("country", kind="mergesort")

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "SeasonMap":
        path = Path(path)
        if not path.exists():
            raise DataValidationError(f"season map not found: {path}")
        df = pd.read_csv(path, dtype={"country": str})
        if list(df.columns[:2]) != ["country", "greenest_month"]:
            raise DataValidationError(f"{path}: header must be country,greenest_month")
        bad = df[(df["greenest_month"] < 1) | (df["greenest_month"] > 12)]
        if len(bad):
            raise DomainError(f"{path}: greenest_month outside 1-12 for {list(bad['country'])}")
        months = {str(c): int(m) for c, m in zip(df["country"], df["greenest_month"])}
        return cls(months, {c: "override" for c in months})


def country_green_month(
    cell_months: np.ndarray,
    weights: GridField,
    mask: CountryMask,
    countries: Sequence[str] | None = None,
    donors: Mapping[str, str] | None = None,
    tol: float = 1e-12,
) -> SeasonMap:
    """Weighted mode of per-cell greenest months within each country.

    Weights are land fractions times cell area; a country whose covered cells
    all have zero weight falls back to area counts. Countries without any
    covered cell copy their donor's month.
    """
    cell_months = np.asarray(cell_months, dtype=int)
    if cell_months.shape != mask.spec.shape or not weights.spec.same_as(mask.spec):
        raise DataValidationError("cell months, weights and mask must share one grid")
    donors = dict(donors or {})
    wanted = list(mask.countries) if countries is None else list(countries)
    area = mask.spec.area()
    w = np.nan_to_num(weights.values, nan=0.0) * area

    months: dict[str, int] = {}
    source: dict[str, str] = {}
    uncovered: list[str] = []
    for country in wanted:
        if country not in mask.countries:
            uncovered.append(country)
            continue
        cells = (mask.codes == mask.countries.index(country)) & (cell_months > 0)
        if not cells.any():
            uncovered.append(country)
            continue
        m = cell_months[cells]
        cw = w[cells]
        if cw.sum() <= 0:
            cw = area[cells]
        score = np.bincount(m, weights=cw, minlength=13)[1:]
        best = score.max()
        months[country] = int(np.flatnonzero(score >= best - tol * max(1.0, best))[0]) + 1
        source[country] = "ndvi"

    missing_donor = []
    for country in uncovered:
        donor = donors.get(country)
        if donor is None or donor not in months:
            missing_donor.append(country)
            continue
        months[country] = months[donor]
        source[country] = f"donor:{donor}"
        logger.info("greenest month of %s taken from donor %s (%d)", country, donor, months[donor])
    if missing_donor:
        raise DataValidationError(
            f"no NDVI coverage and no usable donor for {missing_donor}",
            countries=",".join(missing_donor),
        )
    return SeasonMap(months, source)


# ---------------------------------------------------------------------------
# Monthly country weather and seasonal aggregation
# ---------------------------------------------------------------------------


def country_monthly(
    series: Mapping[str, FieldSeries],
    weights: GridField,
    mask: CountryMask,
    countries: Sequence[str] | None = None,
    report: ZonalReport | None = None,
) -> pd.DataFrame:
    """Zonal means of each monthly variable, pivoted to ``country, year, month, <vars>``."""
    frames = []
    for var, s in series.items():
        z = zonal_aggregate(s, weights, mask, countries, report=report)
        frames.append(z.rename(columns={"value": var}).set_index(["country", "stamp"]))
    out = pd.concat(frames, axis=1).reset_index()
    ym = out["stamp"].str.split("-", expand=True).astype(int)
    out.insert(1, "year", ym[0])
    out.insert(2, "month", ym[1])
    return out.drop(columns="stamp").sort_values(["country", "year", "month"], kind="mergesort").reset_index(drop=True)


@dataclass
class SeasonLog:
    dropped: list[tuple[str, int, str]] = field(default_factory=list)


def seasonal_aggregate(
    cm: pd.DataFrame,
    season_map: SeasonMap,
    window: Window | str,
    log: SeasonLog | None = None,
) -> pd.DataFrame:
    """Seasonal T (mean of months) and P (sum of months) per country and year.

    ``green`` uses months m-2..m+2 around the greenest month m, labeled by the
    year of m and borrowing months from adjacent years; ``calendar`` uses the
    twelve months of the labeled year. Seasons with any missing month are
    dropped.
    """
    window = Window(window)
    log = log if log is not None else SeasonLog()
    variables = [v for v in WEATHER_VARS if v in cm.columns]
    if not variables:
        raise DataValidationError("monthly weather has none of the expected variables")
    rows: list[pd.DataFrame] = []
    for country, g in cm.groupby("country", sort=True):
        if country not in season_map:
            raise DataValidationError(f"season map has no entry for {country}")
        t = (g["year"] * 12 + g["month"] - 1).to_numpy()
        if len(np.unique(t)) != len(t):
            raise DataValidationError(f"duplicate months in monthly weather for {country}")
        full = np.arange(t.min(), t.max() + 1)
        monthly = g.set_index(t)[variables].reindex(full)
        years = np.arange(int(g["year"].min()), int(g["year"].max()) + 1)

        if window == Window.green:
            center = years * 12 + season_map[country] - 1
            width = 2 * GREEN_HALF_WIDTH + 1
            agg = {}
            for var in variables:
                roll = monthly[var].rolling(width, center=True, min_periods=width)
                agg[var] = (roll.sum() if var == "precip" else roll.mean()).reindex(center).to_numpy()
        else:
            agg = {}
            label = full // 12
            for var in variables:
                grouped = monthly[var].groupby(label)
                complete = grouped.count() == 12
                value = grouped.sum() if var == "precip" else grouped.mean()
                agg[var] = value.where(complete).reindex(years).to_numpy()

        season = pd.DataFrame({"country": country, "year": years, **agg})
        incomplete = season[variables].isna().any(axis=1)
        for y in season.loc[incomplete, "year"]:
            log.dropped.append((country, int(y), f"{window.value} season incomplete"))
        rows.append(season.loc[~incomplete])
    if log.dropped:
        logger.info("seasonal_aggregate dropped %d incomplete %s seasons", len(log.dropped), window.value)
    if not rows:
        return pd.DataFrame(columns=["country", "year", *variables])
    return pd.concat(rows, ignore_index=True)


def combined_weights(cropland: GridField, pasture: GridField | None, agg: AggWeights | str) -> GridField:
    """Land-cover weights for one aggregation variant (cropland, or cropland plus pasture capped at 1)."""
    agg = AggWeights(agg)
    if agg == AggWeights.cropland:
        return cropland
    if pasture is None:
        raise DataValidationError("cropland+pasture weights need a pasture grid")
    if not pasture.spec.same_as(cropland.spec):
        raise DataValidationError("cropland and pasture grids differ")
    total = np.clip(np.nan_to_num(cropland.values) + np.nan_to_num(pasture.values), 0.0, 1.0)
    total[np.isnan(cropland.values) & np.isnan(pasture.values)] = np.nan
    return GridField(cropland.spec, total, Variable.weight, cropland.stamp)


def weather_variants(
    monthly: Mapping[str, pd.DataFrame],
    season_maps: Mapping[str, SeasonMap],
    log: SeasonLog | None = None,
) -> pd.DataFrame:
    """Stack every (aggregation weights, window) variant into one long seasonal panel."""
    frames = []
    for agg in AggWeights:
        if agg.value not in monthly:
            continue
        for window in Window:
            s = seasonal_aggregate(monthly[agg.value], season_maps[agg.value], window, log)
            s.insert(0, "window", window.value)
            s.insert(0, "agg_weights", agg.value)
            frames.append(s)
    return pd.concat(frames, ignore_index=True)
