"""Console summaries, run manifests and plot-ready figure data."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import pandas as pd
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from agtfp.config import RunConfig
from agtfp.dataio import CountryMeta
from agtfp.errors import DataValidationError

logger = logging.getLogger(__name__)

console = Console()

MANIFEST_NAME = "run_manifest_{command}.json"


def progress_bar() -> Progress:
    return Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
    )


def print_summary(stage: str, rows: dict[str, Any], notes: Iterable[str] = ()) -> None:
    table = Table(title=f"{stage} Summary")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for key, value in rows.items():
        if isinstance(value, float):
            value = f"{value:.4g}"
        table.add_row(key, str(value))
    console.print(table)

    notes = list(notes)
    if notes:
        console.print("[yellow]Notes (up to 20):[/yellow]")
        for note in notes[:20]:
            console.print(f"  - {note}")


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj: Any) -> Any:
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_csv(path: str | Path, df: pd.DataFrame, index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=index, float_format="%.17g")
    return path


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    timings: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def add(self, path: str | Path, out: Path) -> None:
        path = Path(path)
        self.artifacts[str(path.relative_to(out) if path.is_relative_to(out) else path)] = sha256_file(path)

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "versions": versions(),
            "timings_s": {k: round(v, 3) for k, v in self.timings.items()},
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    def write(self, out: Path) -> Path:
        return write_json(out / MANIFEST_NAME.format(command=self.command), self.to_dict())

    @classmethod
    def for_config(cls, command: str, cfg: RunConfig) -> "RunManifest":
        return cls(command=command, config_hash=cfg.config_hash, seed=cfg.seed)


def versions() -> dict[str, str]:
    import pydantic
    import scipy

    from agtfp import __version__

    return {
        "agtfp": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
    }


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------


def weather_evolution(weather: pd.DataFrame, meta: CountryMeta | None = None, agg: str = "cropland", window: str = "green") -> pd.DataFrame:
    """Annual cross-country mean of seasonal T and of the percent deviation of P from each country's mean.

    Countries are weighted by revenue when ``meta`` is given.
    """
    w = weather[(weather["agg_weights"] == agg) & (weather["window"] == window)].copy()
    if w.empty:
        raise DataValidationError(f"no weather for agg_weights={agg} window={window}")
    w["precip_pct"] = 100.0 * (w["precip"] / w.groupby("country")["precip"].transform("mean") - 1.0)
    w["wt"] = 1.0 if meta is None else meta.weights(list(w["country"])).fillna(0.0).to_numpy()

    def per_year(g: pd.DataFrame) -> pd.Series:
        wt = g["wt"].to_numpy()
        wt = wt if wt.sum() > 0 else np.ones(len(g))
        return pd.Series(
            {
                "tmean": np.average(g["tmean"], weights=wt),
                "precip_pct": np.average(g["precip_pct"], weights=wt),
                "n_countries": len(g),
            }
        )

    return w.groupby("year")[["tmean", "precip_pct", "wt"]].apply(per_year).reset_index()


# stage output -> figure file
FIGURE_SOURCES: dict[str, str] = {
    "fig1_weather.csv": "weather_evolution.csv",
    "fig2_response_T.csv": "response_band_T.csv",
    "fig2_response_P.csv": "response_band_P.csv",
    "fig2_exposure_T.csv": "exposure_T.csv",
    "fig2_exposure_P.csv": "exposure_P.csv",
    "fig3_impacts.csv": "impact_paths.csv",
    "fig3_levels.csv": "levels.csv",
    "fig4_countries.csv": "impacts_country_2020.csv",
    "fig4_regions.csv": "regions_2020.csv",
    "fig5_sweep.csv": "sweep.csv",
}


def collate_figures(out: str | Path) -> tuple[list[str], list[str]]:
    """Copy stage outputs under ``<out>/figures`` with figure names; returns (written, missing)."""
    out = Path(out)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written, missing = [], []
    for target, source in FIGURE_SOURCES.items():
        src = out / source
        if src.exists():
            shutil.copyfile(src, fig_dir / target)
            written.append(target)
        else:
            missing.append(source)
            logger.info("figure data %s skipped: %s not produced yet", target, source)
    return written, missing
