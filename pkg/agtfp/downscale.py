"""Bias-corrected spatial disaggregation of climate-model monthly fields.

Quantile mapping corrects each coarse cell and calendar month against the
coarsened observations; anomalies against the coarse observed climatology
are then interpolated to the fine grid and recombined with the fine
climatology (additive for temperature, multiplicative for precipitation).
Downscaled members are finally reduced to country seasonal trajectories.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from agtfp.config import (
    BASELINE_YEARS,
    EXPERIMENTS,
    IMPACT_YEARS,
    SAMPLE_YEARS,
    SPLICE_YEAR,
    TRAINING_YEARS,
    WEATHER_VARS,
    AggWeights,
    Window,
)
from agtfp.errors import DataValidationError, DomainError
from agtfp.gridops import (
    CountryMask,
    FieldSeries,
    GridField,
    GridSpec,
    Variable,
    ZonalReport,
    coarsen_area_weighted,
    read_series,
    resample_bilinear,
)
from agtfp.season import SeasonLog, SeasonMap, country_monthly, seasonal_aggregate

logger = logging.getLogger(__name__)

EPS = 0.01  # mm/month floor for ratio denominators
RATIO_CAP = 5.0


class Kind(str, Enum):
    additive = "additive"
    ratio = "ratio"


def kind_for(variable: Variable | str) -> Kind:
    return Kind.ratio if Variable(variable) == Variable.precip else Kind.additive


# ---------------------------------------------------------------------------
# Quantile mapping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QmapTable:
    """Sorted training quantiles per (calendar month, cell); rows with NaN are unfitted cells."""

    spec: GridSpec
    kind: Kind
    model_q: np.ndarray  # (12, nlat, nlon, n)
    obs_q: np.ndarray  # (12, nlat, nlon, n)
    training_years: tuple[int, int]
    eps: float = EPS

    def fitted(self, cell: tuple[int, int], month: int) -> bool:
        return bool(np.isfinite(self.model_q[month - 1][cell]).all())


def _month_values(series: FieldSeries, month: int, years: tuple[int, int]) -> np.ndarray:
    lo, hi = years
    sel = (series.months == month) & (series.years >= lo) & (series.years <= hi)
    return series.values[sel]


def fit_quantile_map(
    model: FieldSeries,
    obs_coarse: FieldSeries,
    training_years: tuple[int, int] = TRAINING_YEARS,
    eps: float = EPS,
) -> QmapTable:
    """Pair the sorted training values of model and observations per cell and month.

    Unequal sample sizes are reduced to the smaller count of equidistant quantiles.
    """
    if not model.spec.same_as(obs_coarse.spec):
        raise DataValidationError("model and observations must be on the same coarse grid; coarsen observations first")
    if model.variable != obs_coarse.variable:
        raise DataValidationError(f"variable mismatch: {model.variable.value} vs {obs_coarse.variable.value}")
    nlat, nlon = model.spec.shape
    per_month_m = [_month_values(model, m, training_years) for m in range(1, 13)]
    per_month_o = [_month_values(obs_coarse, m, training_years) for m in range(1, 13)]
    n = min(min(len(v) for v in per_month_m), min(len(v) for v in per_month_o))
    if n < 2:
        raise DomainError(
            f"quantile mapping needs at least 2 training values per month in {training_years}, got {n}"
        )
    model_q = np.full((12, nlat, nlon, n), np.nan)
    obs_q = np.full((12, nlat, nlon, n), np.nan)
    for k in range(12):
        for src, dst in ((per_month_m[k], model_q), (per_month_o[k], obs_q)):
            valid = np.isfinite(src).all(axis=0)
            ordered = np.sort(src, axis=0)
            if len(src) != n:
                ordered = np.quantile(src, np.linspace(0.0, 1.0, n), axis=0)
            dst[k] = np.where(valid[..., None], np.moveaxis(ordered, 0, -1), np.nan)
        both = np.isfinite(model_q[k]).all(axis=-1) & np.isfinite(obs_q[k]).all(axis=-1)
        model_q[k][~both] = np.nan
        obs_q[k][~both] = np.nan
    unfitted = int((~np.isfinite(model_q).all(axis=-1)).sum())
    if unfitted:
        logger.info("quantile map: %d (cell, month) pairs have missing training data", unfitted)
    return QmapTable(model.spec, kind_for(model.variable), model_q, obs_q, tuple(training_years), eps)


def _collapse(qm: np.ndarray, qo: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique model quantiles, each paired with the median of its tied observed values."""
    xs, start = np.unique(qm, return_index=True)
    bounds = [*start[1:], len(qm)]
    ys = np.array([np.median(qo[a:b]) for a, b in zip(start, bounds)])
    return xs, ys


def _map_values(qm: np.ndarray, qo: np.ndarray, x: np.ndarray, kind: Kind, eps: float) -> np.ndarray:
    xs, ys = _collapse(qm, qo)
    if len(xs) == 1:
        return np.full_like(x, np.median(qo), dtype=float)
    out = np.interp(x, xs, ys)
    lo, hi = x < xs[0], x > xs[-1]
    if kind == Kind.additive:
        out[lo] = x[lo] + (ys[0] - xs[0])
        out[hi] = x[hi] + (ys[-1] - xs[-1])
    else:
        out[lo] = np.minimum(x[lo] * ys[0] / max(xs[0], eps), ys[0])
        out[hi] = np.maximum(x[hi] * ys[-1] / max(xs[-1], eps), ys[-1])
        out = np.maximum(out, 0.0)
    return out


def apply_quantile_map(q: QmapTable, x: float | np.ndarray, cell: tuple[int, int], month: int) -> float | np.ndarray:
    """Corrected value(s) for one cell and calendar month; NaN if the cell is unfitted."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    qm, qo = q.model_q[month - 1][cell], q.obs_q[month - 1][cell]
    if not np.isfinite(qm).all():
        out = np.full_like(arr, np.nan)
    else:
        out = np.full_like(arr, np.nan)
        ok = np.isfinite(arr)
        out[ok] = _map_values(qm, qo, arr[ok], q.kind, q.eps)
    return float(out[0]) if np.ndim(x) == 0 else out


def correct_series(q: QmapTable, series: FieldSeries) -> FieldSeries:
    """Quantile-map every cell and month of a coarse model series."""
    if not series.spec.same_as(q.spec):
        raise DataValidationError("series and quantile map are on different grids")
    out = np.full_like(series.values, np.nan)
    nlat, nlon = q.spec.shape
    for month in range(1, 13):
        idx = np.flatnonzero(series.months == month)
        if not len(idx):
            continue
        for i in range(nlat):
            for j in range(nlon):
                out[idx, i, j] = apply_quantile_map(q, series.values[idx, i, j], (i, j), month)
    return FieldSeries(series.spec, series.variable, series.years, series.months, out)


# ---------------------------------------------------------------------------
# Spatial disaggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Climatology:
    spec: GridSpec
    variable: Variable
    values: np.ndarray  # (12, nlat, nlon)
    years: tuple[int, int]

    def month(self, month: int) -> np.ndarray:
        return self.values[month - 1]


def climatology(series: FieldSeries, years: tuple[int, int] = TRAINING_YEARS) -> Climatology:
    """Long-run mean per calendar month over ``years``; precipitation is floored at zero."""
    values = np.full((12, *series.spec.shape), np.nan)
    for m in range(1, 13):
        chunk = _month_values(series, m, years)
        valid = np.isfinite(chunk)
        count = valid.sum(axis=0)
        total = np.where(valid, chunk, 0.0).sum(axis=0)
        values[m - 1] = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    if kind_for(series.variable) == Kind.ratio:
        values = np.where(np.isnan(values), np.nan, np.maximum(values, 0.0))
    return Climatology(series.spec, series.variable, values, tuple(years))


@dataclass
class CapReport:
    hits: list[tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(n for _, n in self.hits)


def spatial_disaggregate(
    bc_coarse: GridField,
    clim_coarse: Climatology,
    clim_fine: Climatology,
    kind: Kind | str,
    *,
    eps: float = EPS,
    cap: float = RATIO_CAP,
    report: CapReport | None = None,
) -> GridField:
    """Interpolate the coarse anomaly to the fine grid and add it back onto the fine climatology."""
    kind = Kind(kind)
    if not bc_coarse.spec.same_as(clim_coarse.spec):
        raise DataValidationError("corrected field and coarse climatology are on different grids")
    month = int(bc_coarse.stamp.split("-")[1])
    c = clim_coarse.month(month)
    f = bc_coarse.values
    fine = clim_fine.month(month)
    if kind == Kind.additive:
        anomaly = f - c
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            anomaly = np.where(f == c, 1.0, f / np.maximum(c, eps))
        over = anomaly > cap
        if over.any():
            n = int(over.sum())
            anomaly = np.where(over, cap, anomaly)
            logger.info("ratio anomaly capped at %.1f in %d cells (%s)", cap, n, bc_coarse.stamp)
            if report is not None:
                report.hits.append((bc_coarse.stamp, n))
    anom_fine = resample_bilinear(GridField(bc_coarse.spec, anomaly, bc_coarse.variable, bc_coarse.stamp), clim_fine.spec)
    if kind == Kind.additive:
        values = anom_fine.values + fine
    else:
        values = np.maximum(anom_fine.values, 0.0) * np.maximum(fine, 0.0)
    return GridField(clim_fine.spec, values, bc_coarse.variable, bc_coarse.stamp)


def bcsd(
    model: FieldSeries,
    qmap: QmapTable,
    clim_coarse: Climatology,
    clim_fine: Climatology,
    *,
    eps: float = EPS,
    cap: float = RATIO_CAP,
    report: CapReport | None = None,
) -> FieldSeries:
    """Quantile-map a coarse model series and disaggregate every month to the fine grid."""
    corrected = correct_series(qmap, model)
    fine = [
        spatial_disaggregate(f, clim_coarse, clim_fine, qmap.kind, eps=eps, cap=cap, report=report)
        for f in corrected.fields()
    ]
    return FieldSeries.from_fields(fine)


def downscale_member(
    raw: Mapping[str, Mapping[str, FieldSeries]],
    observed: Mapping[str, FieldSeries],
    *,
    training_years: tuple[int, int] = TRAINING_YEARS,
    eps: float = EPS,
    cap: float = RATIO_CAP,
    report: CapReport | None = None,
) -> dict[str, dict[str, FieldSeries]]:
    """BCSD for every experiment of one climate model.

    The mapping is trained on the ``historical`` experiment and applied to all
    experiments, so forced and unforced runs share one correction.
    """
    hist = raw["historical"]
    out: dict[str, dict[str, FieldSeries]] = {exp: {} for exp in raw}
    for var, obs_fine in observed.items():
        if var not in hist:
            continue
        coarse_spec = hist[var].spec
        obs_coarse = FieldSeries.from_fields([coarsen_area_weighted(f, coarse_spec) for f in obs_fine.fields()])
        qmap = fit_quantile_map(hist[var], obs_coarse, training_years, eps)
        clim_c = climatology(obs_coarse, training_years)
        clim_f = climatology(obs_fine, training_years)
        for exp, by_var in raw.items():
            if var in by_var:
                out[exp][var] = bcsd(by_var[var], qmap, clim_c, clim_f, eps=eps, cap=cap, report=report)
    return out


# ---------------------------------------------------------------------------
# Scenario manifest and assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GcmMember:
    gcm: str
    files: dict[str, dict[str, list[Path]]]  # experiment -> variable -> grid files

    def complete(self, variables: Sequence[str]) -> bool:
        return all(exp in self.files and all(v in self.files[exp] for v in variables) for exp in EXPERIMENTS)

    def load(self) -> dict[str, dict[str, FieldSeries]]:
        return {exp: {var: read_series(paths) for var, paths in by_var.items()} for exp, by_var in self.files.items()}


def load_scenario_manifest(path: str | Path) -> list[GcmMember]:
    """``{"members": [{"gcm": id, "files": {experiment: {variable: [paths]}}}]}``; paths relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"scenario manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataValidationError(f"invalid scenario manifest {path}: {e}")
    base = path.resolve().parent
    members = []
    seen = set()
    for entry in doc.get("members", []):
        gcm = str(entry["gcm"])
        if gcm in seen:
            raise DataValidationError(f"duplicate GCM {gcm!r} in {path}")
        seen.add(gcm)
        files = {}
        for exp, by_var in entry.get("files", {}).items():
            if exp not in EXPERIMENTS:
                raise DataValidationError(f"{path}: unknown experiment {exp!r} for {gcm}")
            files[exp] = {
                var: [p if p.is_absolute() else base / p for p in map(Path, [paths] if isinstance(paths, str) else paths)]
                for var, paths in by_var.items()
            }
        members.append(GcmMember(gcm, files))
    if not members:
        raise DataValidationError(f"{path}: no GCM members listed")
    return members


SCENARIO_COLUMNS = ["agg_weights", "window", "gcm", "scenario", "country", "year", *WEATHER_VARS]
BASELINE_COLUMNS = ["agg_weights", "window", "gcm", "country", "first_year", "last_year", *WEATHER_VARS]


@dataclass
class ScenarioLog:
    dropped_gcms: list[tuple[str, str]] = field(default_factory=list)
    narrowed: list[tuple[str, int, int]] = field(default_factory=list)
    mismatched: list[tuple[str, str, int]] = field(default_factory=list)
    seasons: SeasonLog = field(default_factory=SeasonLog)


@dataclass
class ScenarioSet:
    """Country seasonal trajectories ``with``/``without`` ACC per GCM plus the unforced baseline."""

    frame: pd.DataFrame
    baseline: pd.DataFrame
    log: ScenarioLog = field(default_factory=ScenarioLog)

    @property
    def gcms(self) -> list[str]:
        return sorted(self.frame["gcm"].unique())

    def variant(self, agg_weights: str, window: str) -> "ScenarioSet":
        def pick(df: pd.DataFrame) -> pd.DataFrame:
            if "agg_weights" not in df.columns:
                return df
            return df[(df["agg_weights"] == agg_weights) & (df["window"] == window)].reset_index(drop=True)

        sub = ScenarioSet(pick(self.frame), pick(self.baseline), self.log)
        if sub.frame.empty:
            raise DataValidationError(f"no scenarios for variant agg_weights={agg_weights} window={window}")
        return sub

    def to_csv(self, scenarios: str | Path, baseline: str | Path) -> None:
        for df, p in ((self.frame, scenarios), (self.baseline, baseline)):
            Path(p).parent.mkdir(parents=True, exist_ok=True)
            df.to_csv(p, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, scenarios: str | Path, baseline: str | Path) -> "ScenarioSet":
        for p in (scenarios, baseline):
            if not Path(p).exists():
                raise DataValidationError(f"scenario input not found: {p}")
        frame = pd.read_csv(scenarios, dtype={"gcm": str, "country": str})
        base = pd.read_csv(baseline, dtype={"gcm": str, "country": str})
        for df, cols, p in ((frame, SCENARIO_COLUMNS, scenarios), (base, BASELINE_COLUMNS, baseline)):
            missing = [c for c in cols if c not in df.columns]
            if missing:
                raise DataValidationError(f"{p}: missing columns {missing}")
        bad = set(frame["scenario"]) - {"with", "without"}
        if bad:
            raise DataValidationError(f"{scenarios}: unknown scenario labels {sorted(bad)}")
        return cls(frame, base)


def _splice(historical: FieldSeries, ssp: FieldSeries) -> FieldSeries:
    return FieldSeries.concat([historical.between(0, SPLICE_YEAR), ssp.between(SPLICE_YEAR + 1, 9999)])


def assemble_scenarios(
    members: Mapping[str, Mapping[str, Mapping[str, FieldSeries]]],
    weights: Mapping[str, GridField],
    mask: CountryMask,
    season_maps: Mapping[str, SeasonMap],
    *,
    countries: Sequence[str] | None = None,
    baseline_years: tuple[int, int] = BASELINE_YEARS,
    log: ScenarioLog | None = None,
) -> ScenarioSet:
    """Reduce downscaled members to country seasonal trajectories.

    ``members`` maps GCM id -> experiment -> variable -> fine monthly series;
    ``weights`` and ``season_maps`` are keyed by aggregation-weight variant.
    With-ACC is ``historical`` through 2014 spliced with ``ssp245`` from 2015;
    without-ACC is ``hist-nat``.
    """
    log = log if log is not None else ScenarioLog()
    lo_traj, hi_traj = SAMPLE_YEARS[0], IMPACT_YEARS[1]
    frames: list[pd.DataFrame] = []
    baselines: list[pd.DataFrame] = []
    for gcm in sorted(members):
        exps = members[gcm]
        missing = [e for e in EXPERIMENTS if e not in exps or not exps[e]]
        if missing:
            log.dropped_gcms.append((gcm, f"missing experiments {missing}"))
            logger.warning("dropping GCM %s: missing experiments %s", gcm, missing)
            continue
        variables = [v for v in WEATHER_VARS if all(v in exps[e] for e in EXPERIMENTS)]
        if not variables:
            log.dropped_gcms.append((gcm, "no variable present in every experiment"))
            logger.warning("dropping GCM %s: no variable present in every experiment", gcm)
            continue
        scen_series = {
            "with": {v: _splice(exps["historical"][v], exps["ssp245"][v]) for v in variables},
            "without": {v: exps["hist-nat"][v] for v in variables},
        }
        for agg in AggWeights:
            if agg.value not in weights:
                continue
            monthly = {
                label: country_monthly(series, weights[agg.value], mask, countries, ZonalReport())
                for label, series in scen_series.items()
            }
            for window in Window:
                seasonal = {
                    label: seasonal_aggregate(cm, season_maps[agg.value], window, log.seasons)
                    for label, cm in monthly.items()
                }
                base = _baseline(seasonal["without"], variables, baseline_years, gcm, log)
                base.insert(0, "window", window.value)
                base.insert(0, "agg_weights", agg.value)
                baselines.append(base)
                traj = {
                    label: s[(s["year"] >= lo_traj) & (s["year"] <= hi_traj)].set_index(["country", "year"])
                    for label, s in seasonal.items()
                }
                common = traj["with"].index.intersection(traj["without"].index)
                for label, t in traj.items():
                    for c, y in t.index.difference(common):
                        log.mismatched.append((gcm, c, int(y)))
                    part = t.loc[common].reset_index()
                    part.insert(0, "scenario", label)
                    part.insert(0, "gcm", gcm)
                    part.insert(0, "window", window.value)
                    part.insert(0, "agg_weights", agg.value)
                    frames.append(part)
    if not frames:
        raise DataValidationError("no complete GCM member to assemble scenarios from")
    frame = pd.concat(frames, ignore_index=True).reindex(columns=SCENARIO_COLUMNS)
    frame = frame.sort_values(["agg_weights", "window", "gcm", "scenario", "country", "year"], kind="mergesort")
    baseline = pd.concat(baselines, ignore_index=True).reindex(columns=BASELINE_COLUMNS)
    n_gcm = frame["gcm"].nunique()
    logger.info("assembled scenarios for %d GCMs (%d dropped)", n_gcm, len(log.dropped_gcms))
    return ScenarioSet(frame.reset_index(drop=True), baseline, log)


def _baseline(
    without: pd.DataFrame,
    variables: Sequence[str],
    years: tuple[int, int],
    gcm: str,
    log: ScenarioLog,
) -> pd.DataFrame:
    lo, hi = years
    window = without[(without["year"] >= lo) & (without["year"] <= hi)]
    if window.empty:
        raise DataValidationError(f"GCM {gcm}: no unforced seasons within the baseline window {lo}-{hi}")
    first, last = int(window["year"].min()), int(window["year"].max())
    if (first, last) != (lo, hi):
        log.narrowed.append((gcm, first, last))
        logger.info("GCM %s: baseline window narrowed to %d-%d", gcm, first, last)
    out = window.groupby("country")[list(variables)].mean().reset_index()
    out.insert(0, "gcm", gcm)
    out.insert(2, "first_year", first)
    out.insert(3, "last_year", last)
    return out
