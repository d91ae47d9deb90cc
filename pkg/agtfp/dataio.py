"""Tabular inputs: TFP/output index panels, country metadata, seasonal weather.

Everything is validated on load and aligned into the canonical regression
table (``RegTable``) by :func:`assemble_panel`.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from agtfp.config import (
    PRECIP_SCALE,
    SAMPLE_YEARS,
    WEATHER_VARS,
    AggWeights,
    Dependent,
    ModelSpec,
    Precip,
    Region,
    RegWeights,
    Window,
)
from agtfp.errors import CoverageError, DataValidationError, DomainError, ParseError

logger = logging.getLogger(__name__)

_VALUE_COLUMNS = {"tfp": "tfp_index", "output": "output_index"}
_LINE_RE = re.compile(r"line (\d+)")


# ---------------------------------------------------------------------------
# Panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TfpPanel:
    """Log index levels, one row per (country, year). ``measure`` is tfp or output."""

    frame: pd.DataFrame
    measure: str = "tfp"

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def countries(self) -> list[str]:
        return sorted(self.frame["country"].unique())


@dataclass(frozen=True)
class GrowthPanel:
    frame: pd.DataFrame
    measure: str = "tfp"

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def countries(self) -> list[str]:
        return sorted(self.frame["country"].unique())


@dataclass(frozen=True)
class CountryMeta:
    """Region, centroid latitude and normalized revenue weight per country."""

    frame: pd.DataFrame

    @property
    def countries(self) -> list[str]:
        return list(self.frame.index)

    def region(self, country: str) -> str:
        return str(self.frame.at[country, "region"])

    def weights(self, countries: list[str] | None = None) -> pd.Series:
        w = self.frame["revenue_weight"]
        return w if countries is None else w.reindex(countries)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "CountryMeta":
        df = df.copy()
        df["country"] = df["country"].astype(str)
        if df["country"].duplicated().any():
            dup = sorted(df.loc[df["country"].duplicated(), "country"].unique())
            raise DataValidationError(f"duplicate countries in metadata: {dup}")
        valid = {r.value for r in Region}
        bad = sorted(set(df["region"]) - valid)
        if bad:
            raise DataValidationError(f"unknown region tokens {bad}; expected one of {sorted(valid)}")
        lat = pd.to_numeric(df["latitude"], errors="coerce")
        if lat.isna().any() or (lat.abs() > 90).any():
            raise DomainError("latitude must be a number in [-90, 90]")
        w = pd.to_numeric(df["revenue_weight"], errors="coerce")
        if w.isna().any() or (w < 0).any() or not np.isfinite(w).all():
            raise DomainError("revenue weights must be finite and nonnegative")
        if w.sum() <= 0:
            raise DomainError("revenue weights sum to zero")
        df["latitude"] = lat.astype(float)
        df["revenue_weight"] = (w / w.sum()).astype(float)
        return cls(df.set_index("country")[["region", "latitude", "revenue_weight"]].sort_index())


def _read_csv_checked(path: str | Path, columns: list[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        m = _LINE_RE.search(str(e))
        raise ParseError(f"malformed CSV {path}: {e}", path=str(path), line=int(m.group(1)) if m else None)
    except pd.errors.EmptyDataError:
        raise ParseError(f"empty CSV {path}", path=str(path), line=1)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ParseError(f"{path}: header must contain {columns}, missing {missing}", path=str(path), line=1)
    return df[columns]


def _numeric_column(df: pd.DataFrame, column: str, path: Path, integer: bool = False) -> pd.Series:
    values = pd.to_numeric(df[column].str.strip(), errors="coerce")
    bad = values.isna() | ~np.isfinite(values.astype(float))
    if integer:
        bad |= values.fillna(0) != np.round(values.fillna(0))
    if bad.any():
        first = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(
            f"{path}: cannot parse {column}={df[column].iloc[first]!r}",
            path=str(path),
            line=first + 2,
        )
    return values.astype(int) if integer else values.astype(float)


def load_tfp_panel(path: str | Path, measure: str = "tfp") -> TfpPanel:
    """Read ``country,year,tfp_index`` (or ``output_index``) and store log levels."""
    if measure not in _VALUE_COLUMNS:
        raise ValueError(f"measure must be one of {sorted(_VALUE_COLUMNS)}")
    path = Path(path)
    value_col = _VALUE_COLUMNS[measure]
    raw = _read_csv_checked(path, ["country", "year", value_col])

    country = raw["country"].str.strip()
    if (country == "").any():
        first = int(np.flatnonzero((country == "").to_numpy())[0])
        raise ParseError(f"{path}: empty country id", path=str(path), line=first + 2)
    year = _numeric_column(raw, "year", path, integer=True)
    index = _numeric_column(raw, value_col, path)

    if (index <= 0).any():
        first = int(np.flatnonzero((index <= 0).to_numpy())[0])
        raise DomainError(
            f"{path}: {value_col} must be positive (line {first + 2}: {index.iloc[first]})",
            path=str(path),
            line=first + 2,
        )
    lo, hi = SAMPLE_YEARS
    out_of_range = (year < lo) | (year > hi)
    if out_of_range.any():
        first = int(np.flatnonzero(out_of_range.to_numpy())[0])
        raise DomainError(f"{path}: year {year.iloc[first]} outside {lo}-{hi}", path=str(path), line=first + 2)

    frame = pd.DataFrame({"country": country, "year": year, "ln_tfp": np.log(index)})
    dup = frame.duplicated(["country", "year"], keep=False)
    if dup.any():
        pairs = sorted({(c, int(y)) for c, y in frame.loc[dup, ["country", "year"]].itertuples(index=False)})
        raise DataValidationError(f"{path}: duplicate (country, year) rows: {pairs[:10]}")

    frame = frame.sort_values(["country", "year"], kind="mergesort").reset_index(drop=True)
    panel = TfpPanel(frame, measure=measure)
    logger.info("loaded %s: %d rows, %d countries", path.name, panel.n_rows, len(panel.countries))
    return panel


def load_country_meta(path: str | Path) -> CountryMeta:
    path = Path(path)
    raw = _read_csv_checked(path, ["country", "region", "latitude", "revenue_weight"])
    raw = raw.assign(country=raw["country"].str.strip(), region=raw["region"].str.strip())
    raw["latitude"] = _numeric_column(raw, "latitude", path)
    raw["revenue_weight"] = _numeric_column(raw, "revenue_weight", path)
    meta = CountryMeta.from_frame(raw)
    logger.info("loaded %s: %d countries", path.name, len(meta.countries))
    return meta


def first_difference(panel: TfpPanel) -> GrowthPanel:
    """Year-over-year log differences; a gap in years restarts the differencing."""
    df = panel.frame
    by_country = df.groupby("country", sort=False)
    prev_year = by_country["year"].shift(1)
    prev_ln = by_country["ln_tfp"].shift(1)
    consecutive = (df["year"] - prev_year) == 1
    out = df.loc[consecutive, ["country", "year"]].copy()
    out["dln_tfp"] = (df["ln_tfp"] - prev_ln)[consecutive]
    return GrowthPanel(out.reset_index(drop=True), measure=panel.measure)


def round_trip_levels(growth: GrowthPanel) -> pd.DataFrame:
    """Rebuild relative index levels from growth rows.

    Each contiguous run starts at 1.0 in the year before its first growth row,
    so ``level`` equals ``index(t) / index(run start)``.
    """
    df = growth.frame.sort_values(["country", "year"], kind="mergesort")
    run_break = (df["year"] - df.groupby("country")["year"].shift(1)) != 1
    run_id = run_break.cumsum()
    level = np.exp(df.groupby(run_id)["dln_tfp"].cumsum())
    return pd.DataFrame({"country": df["country"], "year": df["year"], "run": run_id, "level": level})


# ---------------------------------------------------------------------------
# Seasonal weather panel
# ---------------------------------------------------------------------------

WEATHER_COLUMNS = ["agg_weights", "window", "country", "year", *WEATHER_VARS]


def load_weather_panel(path: str | Path) -> pd.DataFrame:
    """Read ``weather.csv`` (all aggregation/window variants in one file)."""
    path = Path(path)
    raw = _read_csv_checked(path, WEATHER_COLUMNS)
    out = pd.DataFrame(
        {
            "agg_weights": raw["agg_weights"].str.strip(),
            "window": raw["window"].str.strip(),
            "country": raw["country"].str.strip(),
            "year": _numeric_column(raw, "year", path, integer=True),
        }
    )
    for var in WEATHER_VARS:
        out[var] = pd.to_numeric(raw[var], errors="coerce")
    bad_agg = set(out["agg_weights"]) - {a.value for a in AggWeights}
    bad_win = set(out["window"]) - {w.value for w in Window}
    if bad_agg or bad_win:
        raise DataValidationError(f"{path}: unknown variants agg={sorted(bad_agg)} window={sorted(bad_win)}")
    return out


def weather_variant(weather: pd.DataFrame, agg_weights: str, window: str) -> pd.DataFrame:
    """Select one (aggregation weights, season window) variant, indexed by (country, year)."""
    if "agg_weights" in weather.columns:
        weather = weather[(weather["agg_weights"] == agg_weights) & (weather["window"] == window)]
    return weather.drop(columns=[c for c in ("agg_weights", "window") if c in weather.columns])


# ---------------------------------------------------------------------------
# Regression table
# ---------------------------------------------------------------------------


@dataclass
class DropLog:
    entries: list[tuple[str, int, str]] = field(default_factory=list)

    def add(self, country: str, year: int, reason: str) -> None:
        self.entries.append((country, int(year), reason))

    def __len__(self) -> int:
        return len(self.entries)

    def pairs(self) -> list[tuple[str, int]]:
        return [(c, y) for c, y, _ in self.entries]


@dataclass
class RegTable:
    frame: pd.DataFrame
    spec: ModelSpec
    drop_log: DropLog
    lags: int = 0

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def has_precip(self) -> bool:
        return "dP" in self.frame.columns


def latitude_terciles(latitudes: pd.Series, signed: bool = False) -> pd.Series:
    """Three equally-sized latitude groups (0 = closest to the equator).

    Absolute latitude by default; ties are broken by country id.
    """
    key = latitudes if signed else latitudes.abs()
    order = pd.DataFrame({"key": key.to_numpy(), "country": latitudes.index.to_numpy()}).sort_values(["key", "country"], kind="mergesort")
    groups = np.empty(len(order), dtype=int)
    for gid, chunk in enumerate(np.array_split(np.arange(len(order)), 3)):
        groups[chunk] = gid
    return pd.Series(groups, index=order["country"].to_numpy()).reindex(latitudes.index)


def assemble_panel(
    growth: GrowthPanel,
    weather: pd.DataFrame,
    meta: CountryMeta,
    spec: ModelSpec,
    *,
    lags: int = 0,
    coverage_threshold: float = 0.9,
    signed_latitude: bool = False,
) -> RegTable:
    """Inner-join growth with seasonal weather levels and build the Δ regressors.

    ``weather`` is one variant (country, year, tmean/tmin/tmax, precip in mm);
    a multi-variant frame is narrowed to ``spec.weather_key``. Precipitation is
    rescaled to 1,000 mm.
    """
    expected = "output" if spec.dependent == Dependent.output_growth else "tfp"
    if growth.measure != expected:
        raise DataValidationError(
            f"spec dependent={spec.dependent.value} needs a {expected} growth panel, got {growth.measure}"
        )
    weather = weather_variant(weather, *spec.weather_key)
    if weather.duplicated(["country", "year"]).any():
        raise DataValidationError("weather panel has duplicate (country, year) rows")
    w = weather.set_index(["country", "year"])
    use_precip = spec.precip == Precip.include
    tcol = spec.tvar.value

    level_cols = {"T": w[tcol].astype(float)}
    if use_precip:
        level_cols["P"] = w["precip"].astype(float) / PRECIP_SCALE

    g = growth.frame.reset_index(drop=True)
    countries = g["country"].to_numpy()
    years = g["year"].to_numpy()
    drop_log = DropLog()

    known = g["country"].isin(meta.countries).to_numpy()
    for c, y in g.loc[~known, ["country", "year"]].itertuples(index=False):
        drop_log.add(c, y, "country missing from metadata")

    def lookup(series: pd.Series, offset: int) -> np.ndarray:
        idx = pd.MultiIndex.from_arrays([countries, years - offset])
        return series.reindex(idx).to_numpy(dtype=float)

    # offsets 0..lags+1 cover the current difference and every lagged one
    levels = {name: {off: lookup(s, off) for off in range(lags + 2)} for name, s in level_cols.items()}

    ok = known.copy()
    missing_pairs: set[tuple[str, int]] = set()
    for name, by_off in levels.items():
        for off, values in by_off.items():
            bad = ~np.isfinite(values)
            for i in np.flatnonzero(bad & known):
                missing_pairs.add((countries[i], int(years[i] - off)))
            ok &= ~bad
    for i in np.flatnonzero(known & ~ok):
        gaps = sorted(
            {
                int(years[i] - off)
                for by_off in levels.values()
                for off, values in by_off.items()
                if not np.isfinite(values[i])
            }
        )
        drop_log.add(countries[i], years[i], f"weather missing for {countries[i]} in {gaps}")

    coverage = ok.mean() if len(ok) else 0.0
    if coverage < coverage_threshold:
        raise CoverageError(
            f"weather join covers {coverage:.1%} of growth rows, below threshold {coverage_threshold:.0%}",
            missing=sorted(missing_pairs),
        )
    if len(drop_log):
        logger.info("assemble_panel dropped %d of %d growth rows", len(drop_log), len(g))
        for c, y, reason in drop_log.entries[:20]:
            logger.debug("dropped %s %d: %s", c, y, reason)

    out = g.loc[ok, ["country", "year", "dln_tfp"]].reset_index(drop=True)
    sel = np.flatnonzero(ok)
    info = meta.frame.reindex(out["country"])
    out["region"] = info["region"].to_numpy()
    out["latitude"] = info["latitude"].to_numpy()
    lat_by_country = meta.frame["latitude"].reindex(sorted(out["country"].unique()))
    out["lat_tercile"] = latitude_terciles(lat_by_country, signed=signed_latitude).reindex(out["country"]).to_numpy()
    if spec.reg_weights == RegWeights.revenue:
        out["weight"] = info["revenue_weight"].to_numpy()
    else:
        out["weight"] = 1.0

    for name, by_off in levels.items():
        out[name] = by_off[0][sel]
        out[f"{name}_prev"] = by_off[1][sel]
        d = out[name] - out[f"{name}_prev"]
        out[f"d{name}"] = d
        for p in range(2, spec.degree + 1):
            out[f"d{name}{p}"] = d**p
        for lag in range(1, lags + 1):
            dl = by_off[lag][sel] - by_off[lag + 1][sel]
            out[f"d{name}_l{lag}"] = dl
            for p in range(2, spec.degree + 1):
                out[f"d{name}{p}_l{lag}"] = dl**p

    return RegTable(frame=out, spec=spec, drop_log=drop_log, lags=lags)
