"""Model specification and run configuration for agtfp."""

from __future__ import annotations

import hashlib
import json
import os
import re
from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from agtfp.errors import ConfigError


# -- fixed calendar -----------------------------------------------------------

SAMPLE_YEARS = (1961, 2015)
IMPACT_YEARS = (1962, 2020)
SPLICE_YEAR = 2014  # last historical year; ssp245 from SPLICE_YEAR + 1
TRAINING_YEARS = (1961, 2014)
BASELINE_YEARS = (1950, 1972)
PROJECTION_WINDOW = (2006, 2015)
SPLIT_YEAR = 1989
LEVEL_BASE = 100.0

EXPERIMENTS = ("hist-nat", "historical", "ssp245")
WEATHER_VARS = ("tmean", "tmin", "tmax", "precip")

# Precipitation enters the regression in units of 1,000 mm.
PRECIP_SCALE = 1000.0


class Region(str, Enum):
    AFR = "AFR"
    ASIA = "ASIA"
    ECA = "ECA"
    LAC = "LAC"
    NENA = "NENA"
    NAM = "NAM"
    OCE = "OCE"


REGION_NAMES: dict[Region, str] = {
    Region.AFR: "Sub-Saharan Africa",
    Region.ASIA: "Asia",
    Region.ECA: "Europe and Central Asia",
    Region.LAC: "Latin America and the Caribbean",
    Region.NENA: "Near East and North Africa",
    Region.NAM: "North America",
    Region.OCE: "Oceania",
}

WORLD = "WORLD"


# -- model specification ------------------------------------------------------


class TVar(str, Enum):
    tmean = "tmean"
    tmin = "tmin"
    tmax = "tmax"


class Precip(str, Enum):
    include = "include"
    exclude = "exclude"


class Form(str, Enum):
    quadratic = "quadratic"
    cubic = "cubic"


class RegWeights(str, Enum):
    equal = "equal"
    revenue = "revenue"


class AggWeights(str, Enum):
    cropland = "cropland"
    cropland_pasture = "cropland+pasture"


class Window(str, Enum):
    green = "green"
    calendar = "calendar"


class Hetero(str, Enum):
    pooled = "pooled"
    lat3 = "lat3"


class Dependent(str, Enum):
    tfp_growth = "tfp_growth"
    output_growth = "output_growth"


# Countries dropped one at a time by the robustness restrictions.
DROP_COUNTRIES: tuple[str, ...] = ("CHN", "USA", "IND", "BRA")

RESTRICTIONS: tuple[str, ...] = (
    *(f"drop:{c}" for c in DROP_COUNTRIES),
    "coldest10",
    "hottest10",
    "years:1962-1988",
    "years:1989-2015",
)

_RESTRICTION_RE = re.compile(r"^(none|drop:[A-Za-z0-9_.-]+|coldest10|hottest10|years:\d{4}-\d{4})$")


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    tvar: TVar = TVar.tmean
    precip: Precip = Precip.include
    form: Form = Form.quadratic
    reg_weights: RegWeights = RegWeights.equal
    agg_weights: AggWeights = AggWeights.cropland
    window: Window = Window.green
    hetero: Hetero = Hetero.pooled
    restriction: str = "none"
    dependent: Dependent = Dependent.tfp_growth

    @field_validator("restriction")
    @classmethod
    def _check_restriction(cls, value: str) -> str:
        if not _RESTRICTION_RE.match(value):
            raise ValueError(f"unknown restriction {value!r}")
        if value.startswith("years:"):
            lo, hi = (int(x) for x in value[len("years:"):].split("-"))
            if lo > hi:
                raise ValueError(f"empty year restriction {value!r}")
        return value

    # -- derived ----------------------------------------------------------------

    @property
    def key(self) -> str:
        return "|".join(
            [
                self.tvar.value,
                self.precip.value,
                self.form.value,
                self.reg_weights.value,
                self.agg_weights.value,
                self.window.value,
                self.hetero.value,
                self.restriction,
                self.dependent.value,
            ]
        )

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.key.encode()).hexdigest()[:12]

    @property
    def is_baseline(self) -> bool:
        return self == ModelSpec()

    @property
    def weather_key(self) -> tuple[str, str]:
        return (self.agg_weights.value, self.window.value)

    @property
    def degree(self) -> int:
        return 3 if self.form == Form.cubic else 2

    @property
    def year_range(self) -> tuple[int, int] | None:
        if not self.restriction.startswith("years:"):
            return None
        lo, hi = self.restriction[len("years:"):].split("-")
        return int(lo), int(hi)

    @property
    def dropped_country(self) -> str | None:
        if self.restriction.startswith("drop:"):
            return self.restriction[len("drop:"):]
        return None

    def replace(self, **changes) -> "ModelSpec":
        return self.model_copy(update=changes)


BASELINE = ModelSpec()


# -- run configuration --------------------------------------------------------


def _workers_from_env() -> int:
    raw = os.environ.get("ATTRIB_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ATTRIB_WORKERS must be an integer, got {raw!r}", key="workers")


class StageToggles(BaseModel):
    bootstrap: bool = True
    lag_test: bool = False
    slope_test: bool = False
    split_sample: bool = False
    placebo_year: bool = True
    placebo_country: bool = True


_PATH_KEYS = (
    "tfp",
    "output",
    "meta",
    "weather",
    "observed",
    "ndvi",
    "cropland",
    "pasture",
    "mask",
    "mask_legend",
    "season_map",
    "scenario_manifest",
    "scenarios",
    "baseline",
    "bootstrap",
)


class RunConfig(BaseModel):
    # inputs
    tfp: Path | None = None
    output: Path | None = None
    meta: Path | None = None
    weather: Path | None = None
    observed: Path | None = None
    ndvi: Path | None = None
    cropland: Path | None = None
    pasture: Path | None = None
    mask: Path | None = None
    mask_legend: Path | None = None
    season_map: Path | None = None
    scenario_manifest: Path | None = None
    scenarios: Path | None = None
    baseline: Path | None = None
    bootstrap: Path | None = None

    # model and resampling sizes
    spec: ModelSpec = Field(default_factory=ModelSpec)
    sweep: bool = False
    B: int = Field(default=500, ge=1)
    R: int = Field(default=10_000, ge=1)
    n_ensemble: int = Field(default=2_000, ge=1)
    k: int = Field(default=10, ge=2)
    lags: int = Field(default=10, ge=0)
    seed: int = Field(ge=0)

    out: Path = Path("out")
    workers: int = Field(default_factory=_workers_from_env, ge=1)
    stages: StageToggles = Field(default_factory=StageToggles)

    # numeric guards
    coverage_threshold: float = Field(default=0.9, ge=0.0, le=1.0)
    ratio_floor: float = Field(default=0.01, gt=0.0)
    ratio_cap: float = Field(default=5.0, gt=1.0)
    fe_tol: float = Field(default=1e-12, gt=0.0)
    signed_latitude: bool = False
    split_year: int = SPLIT_YEAR
    training_years: tuple[int, int] = TRAINING_YEARS
    baseline_years: tuple[int, int] = BASELINE_YEARS
    donors: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_windows(self) -> "RunConfig":
        for name in ("training_years", "baseline_years"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        return self

    # -- loading ---------------------------------------------------------------

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        """Load a JSON config document; non-None ``overrides`` win over its keys.

        Relative input paths are resolved against the config file's directory.
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", key="config")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}", key="config")
        base = path.resolve().parent
        for key in (*_PATH_KEYS, "out"):
            value = raw.get(key)
            if value is not None and not Path(value).is_absolute():
                raw[key] = str(base / value)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.build(**raw)

    @classmethod
    def build(cls, **raw) -> "RunConfig":
        if raw.get("seed") is None:
            raise ConfigError("seed is mandatory (no wall-clock default)", key="seed")
        try:
            return cls.model_validate(raw)
        except ValueError as e:
            key = None
            errors = getattr(e, "errors", None)
            if callable(errors):
                locs = [err.get("loc", ()) for err in errors()]
                if locs and locs[0]:
                    key = ".".join(str(p) for p in locs[0])
            raise ConfigError(f"invalid configuration: {e}", key=key)

    def require(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f"missing required input {key!r}", key=key)
            if isinstance(value, Path) and not value.exists():
                raise ConfigError(f"input {key!r} does not exist: {value}", key=key)

    @property
    def config_hash(self) -> str:
        payload = self.model_dump_json(exclude={"workers"})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]
