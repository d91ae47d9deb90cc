"""Raster primitives on regular lat-lon grids.

Resampling, area-weighted coarsening and land-cover-weighted zonal
aggregation of monthly fields to country values, plus the grid file format.

Cell area is approximated by cos(center latitude) throughout.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from agtfp.errors import DataValidationError, DomainError, ParseError

logger = logging.getLogger(__name__)


class Variable(str, Enum):
    tmean = "tmean"
    tmin = "tmin"
    tmax = "tmax"
    precip = "precip"
    ndvi = "ndvi"
    weight = "weight"
    mask = "mask"


@dataclass(frozen=True)
class GridSpec:
    """Regular grid; ``lat0``/``lon0`` are the centers of the first row/column."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    nlat: int
    nlon: int

    def __post_init__(self) -> None:
        if self.dlat <= 0 or self.dlon <= 0:
            raise DomainError(f"grid steps must be positive, got dlat={self.dlat} dlon={self.dlon}")
        if self.nlat < 1 or self.nlon < 1:
            raise DomainError(f"grid must have at least one cell, got {self.nlat}x{self.nlon}")
        lat_hi = self.lat0 + (self.nlat - 1) * self.dlat
        lon_hi = self.lon0 + (self.nlon - 1) * self.dlon
        if not (-90.0 < self.lat0 and lat_hi < 90.0):
            raise DomainError(f"cell centers must lie strictly inside (-90, 90), got [{self.lat0}, {lat_hi}]")
        if not (-180.0 <= self.lon0 and lon_hi < 180.0):
            raise DomainError(f"cell centers must lie inside [-180, 180), got [{self.lon0}, {lon_hi}]")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(self.nlat)

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.nlon)

    def area(self) -> np.ndarray:
        """Relative cell area, cos(latitude), broadcast to the grid shape."""
        return np.broadcast_to(np.cos(np.deg2rad(self.lats))[:, None], self.shape)

    def same_as(self, other: "GridSpec", tol: float = 1e-9) -> bool:
        return (
            self.nlat == other.nlat
            and self.nlon == other.nlon
            and np.allclose(
                [self.lat0, self.lon0, self.dlat, self.dlon],
                [other.lat0, other.lon0, other.dlat, other.dlon],
                rtol=0,
                atol=tol,
            )
        )


@dataclass(frozen=True)
class GridField:
    """One variable on one grid for one time stamp; NaN marks missing cells."""

    spec: GridSpec
    values: np.ndarray
    variable: Variable
    stamp: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.spec.shape:
            raise DataValidationError(f"values shape {values.shape} does not match grid {self.spec.shape}")
        if np.isinf(values).any():
            raise DataValidationError(f"{self.variable.value} field {self.stamp!r} contains infinities")
        if self.variable == Variable.weight:
            finite = values[np.isfinite(values)]
            if ((finite < 0) | (finite > 1)).any():
                raise DomainError("weight fractions must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def with_values(self, values: np.ndarray, **changes) -> "GridField":
        return replace(self, values=values, **changes)


@dataclass
class FieldSeries:
    """Monthly fields stacked along time; ``years``/``months`` label each slice."""

    spec: GridSpec
    variable: Variable
    years: np.ndarray
    months: np.ndarray
    values: np.ndarray  # (ntime, nlat, nlon)

    def __post_init__(self) -> None:
        self.years = np.asarray(self.years, dtype=int)
        self.months = np.asarray(self.months, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.years), *self.spec.shape):
            raise DataValidationError(
                f"series shape {self.values.shape} does not match {len(self.years)} stamps on grid {self.spec.shape}"
            )
        if ((self.months < 1) | (self.months > 12)).any():
            raise DataValidationError("months must lie in 1-12")

    def __len__(self) -> int:
        return len(self.years)

    @classmethod
    def from_fields(cls, fields: Sequence[GridField]) -> "FieldSeries":
        if not fields:
            raise DataValidationError("cannot build a series from zero fields")
        spec, variable = fields[0].spec, fields[0].variable
        for f in fields:
            if not f.spec.same_as(spec) or f.variable != variable:
                raise DataValidationError("all fields of a series must share grid and variable")
        years, months = zip(*(parse_month_stamp(f.stamp) for f in fields))
        order = np.lexsort((np.array(months), np.array(years)))
        return cls(
            spec=spec,
            variable=variable,
            years=np.array(years)[order],
            months=np.array(months)[order],
            values=np.stack([fields[i].values for i in order]),
        )

    def fields(self) -> list[GridField]:
        return [
            GridField(self.spec, self.values[i], self.variable, month_stamp(y, m))
            for i, (y, m) in enumerate(zip(self.years, self.months))
        ]

    def select(self, mask: np.ndarray) -> "FieldSeries":
        return FieldSeries(self.spec, self.variable, self.years[mask], self.months[mask], self.values[mask])

    def between(self, first_year: int, last_year: int) -> "FieldSeries":
        return self.select((self.years >= first_year) & (self.years <= last_year))

    @staticmethod
    def concat(parts: Sequence["FieldSeries"]) -> "FieldSeries":
        head = parts[0]
        return FieldSeries(
            head.spec,
            head.variable,
            np.concatenate([p.years for p in parts]),
            np.concatenate([p.months for p in parts]),
            np.concatenate([p.values for p in parts]),
        )


def month_stamp(year: int, month: int) -> str:
    return f"{int(year):04d}-{int(month):02d}"


def parse_month_stamp(stamp: str) -> tuple[int, int]:
    try:
        year, month = stamp.split("-")
        return int(year), int(month)
    except ValueError:
        raise DataValidationError(f"bad month stamp {stamp!r}; expected YYYY-MM")


@dataclass(frozen=True)
class CountryMask:
    """Per-cell country code (-1 for none); ``countries[code]`` is the country id."""

    spec: GridSpec
    codes: np.ndarray
    countries: tuple[str, ...]

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes, dtype=int)
        if codes.shape != self.spec.shape:
            raise DataValidationError(f"mask shape {codes.shape} does not match grid {self.spec.shape}")
        if codes.max(initial=-1) >= len(self.countries) or codes.min(initial=-1) < -1:
            raise DataValidationError("mask codes out of range of the legend")
        object.__setattr__(self, "codes", codes)

    def cells_of(self, country: str) -> np.ndarray:
        return self.codes == self.countries.index(country)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _fractional_index(points: np.ndarray, origin: float, step: float, n: int) -> np.ndarray:
    f = (points - origin) / step
    rounded = np.round(f)
    f = np.where(np.abs(f - rounded) < 1e-9, rounded, f)
    return np.clip(f, 0.0, n - 1)


def resample_bilinear(src: GridField, dst: GridSpec) -> GridField:
    """Bilinear interpolation from the four surrounding source centers.

    Destination points beyond the outermost source centers are clamped to the
    edge. Missing neighbors are dropped and the remaining weights renormalized.
    """
    s = src.spec
    lat_lo, lat_hi = s.lats[0] - s.dlat, s.lats[-1] + s.dlat
    lon_lo, lon_hi = s.lons[0] - s.dlon, s.lons[-1] + s.dlon
    lat_in = (dst.lats >= lat_lo) & (dst.lats <= lat_hi)
    lon_in = (dst.lons >= lon_lo) & (dst.lons <= lon_hi)
    if not lat_in.any() or not lon_in.any():
        raise DomainError("destination grid does not overlap the source grid")

    fi = _fractional_index(dst.lats, s.lat0, s.dlat, s.nlat)
    fj = _fractional_index(dst.lons, s.lon0, s.dlon, s.nlon)
    i0 = np.floor(fi).astype(int)
    j0 = np.floor(fj).astype(int)
    i1 = np.minimum(i0 + 1, s.nlat - 1)
    j1 = np.minimum(j0 + 1, s.nlon - 1)
    wy = (fi - i0)[:, None]
    wx = (fj - j0)[None, :]

    v = src.values
    corners = [
        (v[np.ix_(i0, j0)], (1 - wy) * (1 - wx)),
        (v[np.ix_(i0, j1)], (1 - wy) * wx),
        (v[np.ix_(i1, j0)], wy * (1 - wx)),
        (v[np.ix_(i1, j1)], wy * wx),
    ]
    # Accumulate deviations from a valid reference corner so constants pass through exactly.
    ref = np.full(dst.shape, np.nan)
    for values, _ in reversed(corners):
        ref = np.where(np.isfinite(values), values, ref)
    num = np.zeros(dst.shape)
    den = np.zeros(dst.shape)
    for values, weight in corners:
        valid = np.isfinite(values)
        w = np.where(valid, weight, 0.0)
        num += np.where(valid, (values - np.nan_to_num(ref)) * w, 0.0)
        den += w
    out = np.full(dst.shape, np.nan)
    has = den > 0
    out[has] = ref[has] + num[has] / den[has]
    # zero-weight valid corners only (exact hits on a missing cell's neighbor line)
    exact_ref = ~has & np.isfinite(ref)
    out[exact_ref] = ref[exact_ref]
    return GridField(dst, out, src.variable, src.stamp)


def _cell_index(points: np.ndarray, spec_origin: float, step: float, n: int) -> np.ndarray:
    idx = np.floor((points - (spec_origin - step / 2)) / step + 1e-12).astype(int)
    return np.where((idx >= 0) & (idx < n), idx, -1)


def coarsen_area_weighted(src: GridField, dst: GridSpec) -> GridField:
    """cos(latitude)-weighted mean of the source centers falling in each destination cell."""
    s = src.spec
    ii = _cell_index(s.lats, dst.lat0, dst.dlat, dst.nlat)
    jj = _cell_index(s.lons, dst.lon0, dst.dlon, dst.nlon)
    I, J = np.meshgrid(ii, jj, indexing="ij")
    inside = (I >= 0) & (J >= 0)
    flat = np.where(inside, I * dst.nlon + J, -1)

    v = src.values
    valid = inside & np.isfinite(v)
    area = s.area()
    ref = np.full(dst.nlat * dst.nlon, np.nan)
    # first valid member of each destination cell is the reference value
    order = np.flatnonzero(valid.ravel())[::-1]
    ref[flat.ravel()[order]] = v.ravel()[order]

    target = flat[valid]
    w = area[valid]
    dev = v[valid] - ref[target]
    size = dst.nlat * dst.nlon
    num = np.bincount(target, weights=w * dev, minlength=size)
    den = np.bincount(target, weights=w, minlength=size)
    out = np.full(size, np.nan)
    has = den > 0
    out[has] = ref[has] + num[has] / den[has]

    covered = np.bincount(flat[inside], minlength=size) > 0
    empty = int((~covered).sum())
    if empty:
        logger.warning("coarsen_area_weighted: %d destination cells cover no source centers", empty)
    return GridField(dst, out.reshape(dst.shape), src.variable, src.stamp)


# ---------------------------------------------------------------------------
# Zonal aggregation
# ---------------------------------------------------------------------------


@dataclass
class ZonalReport:
    fallback: list[str] = field(default_factory=list)
    absent: list[str] = field(default_factory=list)
    uncovered: list[str] = field(default_factory=list)


def zonal_aggregate(
    fields: Sequence[GridField] | FieldSeries,
    weights: GridField,
    mask: CountryMask,
    countries: Iterable[str] | None = None,
    report: ZonalReport | None = None,
) -> pd.DataFrame:
    """Weighted country means, one row per (country, stamp).

    value = sum(v * w * area) / sum(w * area) over the country's non-missing
    cells; a country whose weights sum to zero falls back to the plain area
    mean. Returns columns ``country, stamp, value``.
    """
    if isinstance(fields, FieldSeries):
        stack, stamps, spec = fields.values, [month_stamp(y, m) for y, m in zip(fields.years, fields.months)], fields.spec
    else:
        if not fields:
            return pd.DataFrame(columns=["country", "stamp", "value"])
        spec = fields[0].spec
        for f in fields:
            if not f.spec.same_as(spec):
                raise DataValidationError("zonal_aggregate: all fields must share one grid")
        stack, stamps = np.stack([f.values for f in fields]), [f.stamp for f in fields]
    if not weights.spec.same_as(spec) or not mask.spec.same_as(spec):
        raise DataValidationError("zonal_aggregate: weights and mask must be on the field grid")
    report = report if report is not None else ZonalReport()

    wanted = list(mask.countries) if countries is None else list(countries)
    present = [c for c in wanted if c in mask.countries and (mask.codes == mask.countries.index(c)).any()]
    report.absent.extend(c for c in wanted if c not in present)
    if report.absent:
        logger.warning("zonal_aggregate: countries absent from mask: %s", report.absent)

    area = spec.area()
    land_w = np.nan_to_num(weights.values, nan=0.0)
    rows: list[pd.DataFrame] = []
    for country in present:
        cells = mask.codes == mask.countries.index(country)
        vals = stack[:, cells]  # (ntime, ncell)
        a = area[cells]
        lw = land_w[cells] * a
        valid = np.isfinite(vals)
        ref = _first_valid(vals, valid)
        dev = np.where(valid, vals - ref[:, None], 0.0)
        den = (valid * lw).sum(axis=1)
        num = (dev * lw).sum(axis=1)
        use_fallback = den <= 0
        if use_fallback.any():
            if lw.sum() <= 0:
                report.fallback.append(country)
                logger.info("zonal_aggregate: %s has zero land weight, using unweighted area mean", country)
            den_a = (valid * a).sum(axis=1)
            num_a = (dev * a).sum(axis=1)
            den = np.where(use_fallback, den_a, den)
            num = np.where(use_fallback, num_a, num)
        value = np.full(len(stamps), np.nan)
        ok = den > 0
        value[ok] = ref[ok] + num[ok] / den[ok]
        if (~ok).all():
            report.uncovered.append(country)
        rows.append(pd.DataFrame({"country": country, "stamp": stamps, "value": value}))
    if not rows:
        return pd.DataFrame(columns=["country", "stamp", "value"])
    return pd.concat(rows, ignore_index=True)


def _first_valid(vals: np.ndarray, valid: np.ndarray) -> np.ndarray:
    idx = np.argmax(valid, axis=1)
    ref = vals[np.arange(vals.shape[0]), idx]
    return np.where(valid.any(axis=1), ref, 0.0)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

MAGIC = b"AGGRID"
VERSION = 1
# magic(6s) version(H) lat0 lon0 dlat dlon (4d) nlat nlon (2i) variable(8s) stamp(8s)
_HEADER = struct.Struct("<6sH4d2i8s8s")


def _encode_record(f: GridField) -> bytes:
    s = f.spec
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        s.lat0,
        s.lon0,
        s.dlat,
        s.dlon,
        s.nlat,
        s.nlon,
        f.variable.value.encode("ascii"),
        f.stamp.encode("ascii"),
    )
    return header + np.ascontiguousarray(f.values, dtype="<f8").tobytes()


def write_grid(path: str | Path, fields: GridField | Sequence[GridField]) -> Path:
    """Write one or more records (header + row-major float64, NaN = missing)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [fields] if isinstance(fields, GridField) else list(fields)
    with path.open("wb") as fh:
        for f in records:
            fh.write(_encode_record(f))
    return path


def read_grid(path: str | Path) -> list[GridField]:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"grid file not found: {path}")
    data = path.read_bytes()
    out: list[GridField] = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < _HEADER.size:
            raise ParseError(f"{path}: truncated header at byte {pos}", path=str(path))
        magic, version, lat0, lon0, dlat, dlon, nlat, nlon, var, stamp = _HEADER.unpack_from(data, pos)
        if magic != MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r} at byte {pos}", path=str(path))
        if version != VERSION:
            raise ParseError(f"{path}: unsupported version {version}", path=str(path))
        pos += _HEADER.size
        nbytes = 8 * nlat * nlon
        if len(data) - pos < nbytes:
            raise ParseError(f"{path}: truncated payload at byte {pos}", path=str(path))
        values = np.frombuffer(data, dtype="<f8", count=nlat * nlon, offset=pos).reshape(nlat, nlon).copy()
        pos += nbytes
        spec = GridSpec(lat0, lon0, dlat, dlon, nlat, nlon)
        variable = Variable(var.rstrip(b"\0").decode("ascii"))
        out.append(GridField(spec, values, variable, stamp.rstrip(b"\0").decode("ascii")))
    return out


def read_series(paths: str | Path | Sequence[str | Path]) -> FieldSeries:
    paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
    fields = [f for p in paths for f in read_grid(p)]
    return FieldSeries.from_fields(fields)


def write_grid_csv(path: str | Path, f: GridField) -> Path:
    """Debug encoder: one ``lat,lon,value`` row per cell (missing cells left empty)."""
    path = Path(path)
    lat, lon = np.meshgrid(f.spec.lats, f.spec.lons, indexing="ij")
    pd.DataFrame({"lat": lat.ravel(), "lon": lon.ravel(), "value": f.values.ravel()}).to_csv(
        path, index=False, float_format="%.17g"
    )
    return path


def write_mask(path: str | Path, legend_path: str | Path, mask: CountryMask) -> None:
    codes = np.where(mask.codes >= 0, mask.codes.astype(float), np.nan)
    write_grid(path, GridField(mask.spec, codes, Variable.mask))
    pd.DataFrame({"code": range(len(mask.countries)), "country": mask.countries}).to_csv(legend_path, index=False)


def read_mask(path: str | Path, legend_path: str | Path) -> CountryMask:
    (f,) = read_grid(path)
    if f.variable != Variable.mask:
        raise DataValidationError(f"{path}: expected a mask grid, got {f.variable.value}")
    legend = pd.read_csv(legend_path, dtype={"code": int, "country": str}).sort_values("code")
    if list(legend["code"]) != list(range(len(legend))):
        raise DataValidationError(f"{legend_path}: legend codes must be 0..n-1")
    codes = np.where(np.isfinite(f.values), f.values, -1).astype(int)
    return CountryMask(f.spec, codes, tuple(legend["country"]))
