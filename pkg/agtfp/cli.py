"""CLI entry point for agtfp: weather-response estimation and climate attribution.

Usage:
    python -m agtfp synth --out bundle --seed 7
    python -m agtfp ingest --config bundle/config.json
    python -m agtfp season --config bundle/config.json
    python -m agtfp downscale --config bundle/config.json
    python -m agtfp fit --config bundle/config.json
    python -m agtfp bootstrap --config bundle/config.json --workers 8
    python -m agtfp placebo --config bundle/config.json
    python -m agtfp cv --config bundle/config.json
    python -m agtfp impact --config bundle/config.json
    python -m agtfp sweep --config bundle/config.json --workers 8
    python -m agtfp report --config bundle/config.json

Every stage writes fixed file names under ``--out`` plus
``run_manifest_<command>.json``. Exit status: 0 success, 1 usage or
configuration error, 2 data validation failure, 3 numerical failure.

Environment variables:
    ATTRIB_WORKERS: default for --workers (fallback: 1)
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Iterator

import numpy as np
import pandas as pd
import typer
from rich.console import Console

try:  # typer >= 0.22 vendors click; its exceptions are distinct from the standalone package
    from typer._click import exceptions as click
except ImportError:  # older typer re-raises standalone click exceptions
    import click
from rich.logging import RichHandler

from agtfp.config import PRECIP_SCALE, WEATHER_VARS, AggWeights, Dependent, Hetero, ModelSpec, RunConfig
from agtfp.errors import AgtfpError, ConfigError, DataValidationError, NumericalError
from agtfp.report import RunManifest, console, print_summary, progress_bar, write_csv, write_json

logger = logging.getLogger("agtfp")

app = typer.Typer(help="Weather-response estimation and climate-change attribution for agricultural TFP.")

err_console = Console(stderr=True)

ConfigOpt = Annotated[Path | None, typer.Option("--config", "-c", help="JSON run configuration.")]
OutOpt = Annotated[Path | None, typer.Option("--out", help="Output directory (overrides the config).")]
SeedOpt = Annotated[int | None, typer.Option("--seed", help="Run seed (overrides the config).")]
WorkersOpt = Annotated[int | None, typer.Option("--workers", min=1, help="Parallel workers; results do not depend on it.")]
VerboseOpt = Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging.")]


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _fail(e: AgtfpError) -> None:
    err_console.print_json(json.dumps(e.to_dict(), default=str))
    raise typer.Exit(code=e.exit_code)


def load_config(config: Path | None, **overrides) -> RunConfig:
    if config is not None:
        return RunConfig.from_file(config, **overrides)
    return RunConfig.build(**{k: v for k, v in overrides.items() if v is not None})


@contextmanager
def _stage(
    command: str,
    config: Path | None,
    out: Path | None,
    seed: int | None,
    workers: int | None,
    verbose: bool,
) -> Iterator[tuple[RunConfig, RunManifest]]:
    """Load the config, time the stage, write its manifest and map failures to exit codes."""
    _setup_logging(verbose)
    try:
        cfg = load_config(config, out=out, seed=seed, workers=workers)
        cfg.out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.for_config(command, cfg)
        start = time.perf_counter()
        yield cfg, manifest
        manifest.timings["total"] = time.perf_counter() - start
        path = manifest.write(cfg.out)
        console.print(f"[green]{command} done[/green] -> {cfg.out} ({path.name})")
    except AgtfpError as e:
        _fail(e)
    except np.linalg.LinAlgError as e:
        _fail(NumericalError(f"linear algebra failure: {e}"))


def _input(cfg: RunConfig, key: str, produced: str | None = None) -> Path:
    """A configured input path, or the file an earlier stage wrote under ``out``."""
    value = getattr(cfg, key)
    if value is None and produced is not None and (cfg.out / produced).exists():
        return cfg.out / produced
    cfg.require(key)
    return value


def _save(manifest: RunManifest, cfg: RunConfig, path: Path) -> Path:
    manifest.add(path, cfg.out)
    return path


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------


def _load_meta(cfg: RunConfig):
    from agtfp.dataio import load_country_meta

    return load_country_meta(_input(cfg, "meta"))


def _load_growth(cfg: RunConfig, spec: ModelSpec):
    from agtfp.dataio import first_difference, load_tfp_panel

    if spec.dependent == Dependent.output_growth:
        return first_difference(load_tfp_panel(_input(cfg, "output"), measure="output"))
    return first_difference(load_tfp_panel(_input(cfg, "tfp"), measure="tfp"))


def _load_table(cfg: RunConfig, spec: ModelSpec | None = None, *, lags: int = 0, coverage: float | None = None):
    """Growth panel, metadata and the assembled regression table for ``spec``."""
    from agtfp.dataio import assemble_panel, load_weather_panel

    spec = spec or cfg.spec
    growth = _load_growth(cfg, spec)
    meta = _load_meta(cfg)
    weather = load_weather_panel(_input(cfg, "weather", "weather.csv"))
    rt = assemble_panel(
        growth,
        weather,
        meta,
        spec,
        lags=lags,
        coverage_threshold=cfg.coverage_threshold if coverage is None else coverage,
        signed_latitude=cfg.signed_latitude,
    )
    return growth, meta, weather, rt


def _seed(cfg: RunConfig) -> int:
    from agtfp.sweep import spec_seed

    return spec_seed(cfg.seed, cfg.spec)


def _load_mask_and_weights(cfg: RunConfig):
    from agtfp.gridops import read_grid, read_mask
    from agtfp.season import combined_weights

    mask = read_mask(_input(cfg, "mask"), _input(cfg, "mask_legend"))
    (cropland,) = read_grid(_input(cfg, "cropland"))
    pasture = read_grid(cfg.pasture)[0] if cfg.pasture is not None else None
    for name, f in (("cropland", cropland), ("pasture", pasture)):
        if f is not None and not f.spec.same_as(mask.spec):
            raise DataValidationError(f"{name} grid differs from the country mask grid", key=name)
    weights = {
        agg.value: combined_weights(cropland, pasture, agg)
        for agg in AggWeights
        if agg == AggWeights.cropland or pasture is not None
    }
    return mask, weights


def _load_observed(cfg: RunConfig):
    from agtfp.gridops import read_series

    root = _input(cfg, "observed")
    files = {var: root / f"{var}.grid" for var in WEATHER_VARS} if root.is_dir() else {}
    observed = {var: read_series(p) for var, p in files.items() if p.exists()}
    if "tmean" not in observed or "precip" not in observed:
        raise DataValidationError(f"observed grids in {root} must include tmean.grid and precip.grid")
    return observed


def _countries(cfg: RunConfig, mask) -> list[str]:
    if cfg.meta is not None:
        return _load_meta(cfg).countries
    return list(mask.countries)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@app.command("ingest")
def ingest(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """Validate the TFP panel, metadata and seasonal weather and build the regression table.

    Args:
        config: JSON run configuration (inputs tfp, meta, weather).
        out: Output directory; writes panel.csv, drop_log.csv and ingest_summary.json.
        seed: Run seed.
        workers: Unused by this stage.
        verbose: Debug logging.
    """
    with _stage("ingest", config, out, seed, workers, verbose) as (cfg, manifest):
        growth, meta, weather, rt = _load_table(cfg)
        _save(manifest, cfg, write_csv(cfg.out / "panel.csv", rt.frame))
        drops = pd.DataFrame(rt.drop_log.entries, columns=["country", "year", "reason"])
        _save(manifest, cfg, write_csv(cfg.out / "drop_log.csv", drops))
        summary = {
            "spec": cfg.spec.key,
            "growth_rows": growth.n_rows,
            "table_rows": len(rt),
            "countries": int(rt.frame["country"].nunique()),
            "first_year": int(rt.frame["year"].min()),
            "last_year": int(rt.frame["year"].max()),
            "dropped_rows": len(rt.drop_log),
            "weather_variants": int(weather.groupby(["agg_weights", "window"]).ngroups),
        }
        _save(manifest, cfg, write_json(cfg.out / "ingest_summary.json", summary))
        print_summary("Ingest", summary, [f"{c} {y}: {r}" for c, y, r in rt.drop_log.entries])


@app.command("season")
def season(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """Greenest month per country from NDVI and seasonal weather for every variant.

    Args:
        config: JSON run configuration (inputs observed, ndvi, cropland, pasture,
            mask, mask_legend; optional season_map override and donors).
        out: Output directory; writes weather.csv, season_map_<agg>.csv and season_log.csv.
        seed: Run seed.
        workers: Unused by this stage.
        verbose: Debug logging.
    """
    from agtfp.gridops import GridField, Variable, ZonalReport, read_grid, resample_bilinear
    from agtfp.report import weather_evolution
    from agtfp.season import (
        N_BINS,
        NdviClim,
        SeasonLog,
        SeasonMap,
        country_green_month,
        country_monthly,
        greenest_month_cell,
        ndvi_climatology,
        ndvi_stack,
        weather_variants,
    )

    with _stage("season", config, out, seed, workers, verbose) as (cfg, manifest):
        mask, weights = _load_mask_and_weights(cfg)
        observed = _load_observed(cfg)
        countries = _countries(cfg, mask)

        if cfg.season_map is not None:
            override = SeasonMap.read_csv(cfg.season_map)
            season_maps = {agg: override for agg in weights}
        else:
            spec, stack = ndvi_stack(read_grid(_input(cfg, "ndvi")))
            clim = ndvi_climatology(spec, stack)
            if not clim.spec.same_as(mask.spec):
                logger.info("resampling the NDVI climatology to the mask grid")
                bins = [
                    resample_bilinear(GridField(clim.spec, clim.values[b], Variable.ndvi), mask.spec).values
                    for b in range(N_BINS)
                ]
                clim = NdviClim(mask.spec, np.stack(bins))
            cell_months = greenest_month_cell(clim)
            season_maps = {
                agg: country_green_month(cell_months, w, mask, countries, donors=cfg.donors)
                for agg, w in weights.items()
            }

        report, log = ZonalReport(), SeasonLog()
        monthly = {agg: country_monthly(observed, w, mask, countries, report) for agg, w in weights.items()}
        weather = weather_variants(monthly, season_maps, log)

        _save(manifest, cfg, write_csv(cfg.out / "weather.csv", weather))
        for agg, sm in season_maps.items():
            frame = sm.to_frame().assign(source=lambda d: d["country"].map(sm.source).fillna("ndvi"))
            _save(manifest, cfg, write_csv(cfg.out / f"season_map_{agg}.csv", frame))
        _save(manifest, cfg, write_csv(cfg.out / "season_log.csv", pd.DataFrame(log.dropped, columns=["country", "year", "reason"])))
        meta = _load_meta(cfg) if cfg.meta is not None else None
        _save(manifest, cfg, write_csv(cfg.out / "weather_evolution.csv", weather_evolution(weather, meta)))
        print_summary(
            "Season",
            {
                "countries": len(countries),
                "variants": int(weather.groupby(["agg_weights", "window"]).ngroups),
                "seasonal rows": len(weather),
                "dropped seasons": len(log.dropped),
                "zero-weight fallbacks": len(set(report.fallback)),
                "absent from mask": len(set(report.absent)),
            },
        )


@app.command("downscale")
def downscale(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """Bias-correct and downscale climate-model runs and build with/without-ACC scenarios.

    Args:
        config: JSON run configuration (inputs scenario_manifest, observed, cropland,
            pasture, mask, mask_legend and a season map from the season stage).
        out: Output directory; writes scenarios.csv, baseline.csv and downscale_log.json.
        seed: Run seed.
        workers: Unused by this stage.
        verbose: Debug logging.
    """
    from agtfp.downscale import CapReport, ScenarioLog, assemble_scenarios, downscale_member, load_scenario_manifest
    from agtfp.season import SeasonMap

    with _stage("downscale", config, out, seed, workers, verbose) as (cfg, manifest):
        mask, weights = _load_mask_and_weights(cfg)
        observed = _load_observed(cfg)
        countries = _countries(cfg, mask)
        season_maps = {}
        for agg in weights:
            produced = cfg.out / f"season_map_{agg}.csv"
            if cfg.season_map is not None:
                season_maps[agg] = SeasonMap.read_csv(cfg.season_map)
            elif produced.exists():
                season_maps[agg] = SeasonMap.read_csv(produced)
            else:
                raise ConfigError("missing required input 'season_map' (run the season stage first)", key="season_map")

        members = load_scenario_manifest(_input(cfg, "scenario_manifest"))
        caps = CapReport()
        downscaled = {}
        with progress_bar() as progress:
            task = progress.add_task("Downscaling GCMs", total=len(members))
            for member in members:
                raw = member.load()
                if "historical" in raw:
                    downscaled[member.gcm] = downscale_member(
                        raw,
                        observed,
                        training_years=cfg.training_years,
                        eps=cfg.ratio_floor,
                        cap=cfg.ratio_cap,
                        report=caps,
                    )
                else:
                    downscaled[member.gcm] = {exp: {} for exp in raw}
                progress.advance(task)

        log = ScenarioLog()
        ss = assemble_scenarios(
            downscaled, weights, mask, season_maps, countries=countries, baseline_years=cfg.baseline_years, log=log
        )
        ss.to_csv(cfg.out / "scenarios.csv", cfg.out / "baseline.csv")
        _save(manifest, cfg, cfg.out / "scenarios.csv")
        _save(manifest, cfg, cfg.out / "baseline.csv")
        payload = {
            "gcms": ss.gcms,
            "dropped_gcms": [{"gcm": g, "reason": r} for g, r in log.dropped_gcms],
            "narrowed_baselines": [{"gcm": g, "first_year": a, "last_year": b} for g, a, b in log.narrowed],
            "mismatched_rows": len(log.mismatched),
            "dropped_seasons": len(log.seasons.dropped),
            "ratio_cap_hits": caps.total,
            "ratio_capped_fields": len(caps.hits),
        }
        _save(manifest, cfg, write_json(cfg.out / "downscale_log.json", payload))
        print_summary(
            "Downscale",
            {
                "GCMs kept": len(ss.gcms),
                "GCMs dropped": len(log.dropped_gcms),
                "scenario rows": len(ss.frame),
                "ratio cap hits": caps.total,
            },
            [f"{g}: {r}" for g, r in log.dropped_gcms],
        )


def _response_tables(rt, fit_beta: pd.Series, draws: pd.DataFrame | None, groups: list[int | None]) -> dict[str, pd.DataFrame]:
    from agtfp.econ import exposure_histogram, response_band, response_curve

    out: dict[str, pd.DataFrame] = {}
    for var in ("T", "P"):
        if var == "P" and not rt.has_precip:
            continue
        scale = PRECIP_SCALE if var == "P" else 1.0
        exposure = rt.frame[var].to_numpy(dtype=float) * scale
        levels = np.linspace(exposure.min(), exposure.max(), 101)
        parts = []
        for g in groups:
            sel = exposure if g is None else exposure[rt.frame["lat_tercile"].to_numpy() == g]
            if draws is None:
                part = response_curve(fit_beta, var, levels, sel, group=g)
            else:
                part = response_band(draws, var, levels, sel, group=g, estimate=fit_beta)
            if g is not None:
                part.insert(0, "group", g)
            parts.append(part)
        out[var] = pd.concat(parts, ignore_index=True)
        out[f"exposure_{var}"] = exposure_histogram(rt, var)
    return out


def _groups(spec: ModelSpec) -> list[int | None]:
    return [0, 1, 2] if spec.hetero == Hetero.lat3 else [None]


@app.command("fit")
def fit(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """Estimate the two-way fixed-effects weather response for the configured spec.

    Args:
        config: JSON run configuration (inputs tfp or output, meta, weather; spec).
        out: Output directory; writes fit.json, coefficients.csv, response_T.csv and response_P.csv.
        seed: Run seed.
        workers: Unused by this stage.
        verbose: Debug logging.
    """
    from agtfp.econ import coefficient_table, fit_spec

    with _stage("fit", config, out, seed, workers, verbose) as (cfg, manifest):
        _, _, _, rt = _load_table(cfg)
        result = fit_spec(rt, cfg.spec, tol=cfg.fe_tol)
        payload = {"spec": cfg.spec.model_dump(mode="json"), "hash": cfg.spec.hash, **result.to_dict()}
        payload["dropped_rows"] = len(rt.drop_log)
        _save(manifest, cfg, write_json(cfg.out / "fit.json", payload))
        _save(manifest, cfg, write_csv(cfg.out / "coefficients.csv", coefficient_table(result)))
        for name, table in _response_tables(rt, result.beta, None, _groups(cfg.spec)).items():
            fname = f"response_{name}.csv" if name in ("T", "P") else f"{name}.csv"
            _save(manifest, cfg, write_csv(cfg.out / fname, table))
        rows = {term: float(v) for term, v in result.beta.items()}
        rows.update({"n": result.n, "within R2": result.r2_within})
        print_summary("Fit", rows)


@app.command("bootstrap")
def bootstrap(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """Year-by-region block bootstrap of the coefficients, response bands and auxiliary tests.

    Args:
        config: JSON run configuration (inputs as for fit; B, lags, split_year, stage toggles).
        out: Output directory; writes bootstrap.csv, bootstrap_summary.json, coefficients.csv,
            response_band_T.csv, response_band_P.csv and, when toggled on, lag_test.json,
            slope_test.json and split_sample.csv.
        seed: Run seed.
        workers: Parallel bootstrap draws.
        verbose: Debug logging.
    """
    from agtfp.econ import build_design, coefficient_table, cumulative_lag_test, fit_design, slope_change_test, split_sample_fits
    from agtfp.inference import bootstrap_design
    from agtfp.rng import derive_seed

    with _stage("bootstrap", config, out, seed, workers, verbose) as (cfg, manifest):
        _, _, _, rt = _load_table(cfg)
        s = _seed(cfg)
        design = build_design(rt, cfg.spec)
        result = fit_design(design, tol=cfg.fe_tol)
        with progress_bar() as progress:
            task = progress.add_task("Bootstrap draws", total=cfg.B)
            ens = bootstrap_design(
                design, cfg.B, s, workers=cfg.workers, tol=cfg.fe_tol, on_draw=lambda: progress.advance(task)
            )
        _save(manifest, cfg, ens.to_csv(cfg.out / "bootstrap.csv"))
        _save(manifest, cfg, write_csv(cfg.out / "coefficients.csv", coefficient_table(result, ens.draws)))
        for name, table in _response_tables(rt, result.beta, ens.draws, _groups(cfg.spec)).items():
            fname = f"response_band_{name}.csv" if name in ("T", "P") else f"{name}.csv"
            _save(manifest, cfg, write_csv(cfg.out / fname, table))
        summary = {
            "B": ens.B,
            "seed": s,
            "blocks": ens.n_blocks,
            "redraws": ens.redraws,
            "ci90": ens.ci(0.90).to_dict(orient="index"),
            "ci95": ens.ci(0.95).to_dict(orient="index"),
        }

        if cfg.stages.lag_test:
            _, _, _, lag_rt = _load_table(cfg, lags=cfg.lags, coverage=0.0)
            tests = cumulative_lag_test(lag_rt, cfg.spec, B=cfg.B, seed=derive_seed(s, "lag_test"), workers=cfg.workers)
            payload = [t.__dict__ for t in tests]
            _save(manifest, cfg, write_json(cfg.out / "lag_test.json", payload))
            summary["lag_test"] = {t.variable: t.p_value for t in tests}
        if cfg.stages.slope_test:
            st = slope_change_test(rt, cfg.spec, cfg.split_year, B=cfg.B, seed=derive_seed(s, "slope_test"), workers=cfg.workers)
            payload = {k: v for k, v in st.__dict__.items() if k != "draws"}
            _save(manifest, cfg, write_json(cfg.out / "slope_test.json", payload))
            summary["slope_test_p"] = st.p_value
        if cfg.stages.split_sample:
            fits = split_sample_fits(rt, cfg.spec, cfg.split_year)
            table = pd.DataFrame({period: f.beta for period, f in fits.items()}).rename_axis("term").reset_index()
            _save(manifest, cfg, write_csv(cfg.out / "split_sample.csv", table))

        _save(manifest, cfg, write_json(cfg.out / "bootstrap_summary.json", summary))
        print_summary("Bootstrap", {"draws": ens.B, "blocks": ens.n_blocks, "redraws": ens.redraws, "seed": s})


@app.command("placebo")
def placebo(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
    force_identity: Annotated[bool, typer.Option("--force-identity", help="Use the identity permutation (diagnostic).")] = False,
) -> None:
    """Placebo tests reshuffling weather across years and across countries.

    Args:
        config: JSON run configuration (inputs as for fit; R and stage toggles).
        out: Output directory; writes placebo_year.csv, placebo_country.csv and placebo_summary.json.
        seed: Run seed.
        workers: Parallel placebo draws.
        verbose: Debug logging.
        force_identity: Refit on the unshuffled data every draw.
    """
    from agtfp.econ import build_design
    from agtfp.inference import PlaceboMode, placebo_design

    with _stage("placebo", config, out, seed, workers, verbose) as (cfg, manifest):
        _, _, _, rt = _load_table(cfg)
        design = build_design(rt, cfg.spec)
        s = _seed(cfg)
        modes = [m for m, on in ((PlaceboMode.year, cfg.stages.placebo_year), (PlaceboMode.country, cfg.stages.placebo_country)) if on]
        summary = {}
        with progress_bar() as progress:
            for mode in modes:
                task = progress.add_task(f"Placebo by {mode.value}", total=cfg.R)
                dist = placebo_design(
                    design,
                    mode,
                    cfg.R,
                    s,
                    workers=cfg.workers,
                    tol=cfg.fe_tol,
                    force_identity=force_identity,
                    on_draw=lambda task=task: progress.advance(task),
                )
                path = cfg.out / f"placebo_{mode.value}.csv"
                _save(manifest, cfg, write_csv(path, dist.draws, index=True))
                summary[mode.value] = {
                    "R": dist.R,
                    "redraws": dist.redraws,
                    "terms": dist.summary().to_dict(orient="index"),
                }
        _save(manifest, cfg, write_json(cfg.out / "placebo_summary.json", summary))
        rows = {f"{m} percentile {t}": v["percentile"] for m, block in summary.items() for t, v in block["terms"].items()}
        print_summary("Placebo", rows)


@app.command("cv")
def cv(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """k-fold cross-validation by years against the fixed-effects-only model.

    Args:
        config: JSON run configuration (inputs as for fit; k).
        out: Output directory; writes cv.json.
        seed: Run seed.
        workers: Unused by this stage.
        verbose: Debug logging.
    """
    from agtfp.econ import build_design
    from agtfp.inference import cv_design

    with _stage("cv", config, out, seed, workers, verbose) as (cfg, manifest):
        _, _, _, rt = _load_table(cfg)
        result = cv_design(build_design(rt, cfg.spec), cfg.k, _seed(cfg), tol=cfg.fe_tol)
        payload = {"k": result.k, "mse": result.mse, "mse_null": result.mse_null, "reduction": result.reduction, "folds": result.folds}
        _save(manifest, cfg, write_json(cfg.out / "cv.json", payload))
        print_summary("CV", {"folds": result.k, "MSE": result.mse, "MSE (FE only)": result.mse_null, "reduction": result.reduction})


@app.command("impact")
def impact(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """Ensemble of cumulative ACC impacts, regional aggregates, levels and years lost.

    Args:
        config: JSON run configuration (inputs as for fit plus scenarios and baseline;
            bootstrap draws are read from the bootstrap stage or drawn here).
        out: Output directory; writes impacts.csv, impacts_country.csv, levels.csv,
            summary.json, regions_2020.csv and impact_paths.csv.
        seed: Run seed.
        workers: Parallel bootstrap draws when no draws are on disk.
        verbose: Debug logging.
    """
    from agtfp.counterfactual import aggregate_regions, ensemble_impacts, impact_summary, pct, project_and_level
    from agtfp.downscale import ScenarioSet
    from agtfp.econ import build_design
    from agtfp.inference import BootstrapEnsemble, bootstrap_design

    with _stage("impact", config, out, seed, workers, verbose) as (cfg, manifest):
        growth, meta, _, rt = _load_table(cfg)
        s = _seed(cfg)
        ss = ScenarioSet.read_csv(_input(cfg, "scenarios", "scenarios.csv"), _input(cfg, "baseline", "baseline.csv"))
        draws_path = cfg.bootstrap or (cfg.out / "bootstrap.csv")
        if draws_path.exists():
            ens = BootstrapEnsemble.read_csv(draws_path, seed=s)
        else:
            logger.info("no bootstrap draws at %s; drawing B=%d now", draws_path, cfg.B)
            ens = bootstrap_design(build_design(rt, cfg.spec), cfg.B, s, workers=cfg.workers, tol=cfg.fe_tol)

        groups = None
        if cfg.spec.hetero == Hetero.lat3:
            groups = rt.frame.drop_duplicates("country").set_index("country")["lat_tercile"]
        countries = sorted(rt.frame["country"].unique())
        ie = ensemble_impacts(ens, ss, cfg.spec, cfg.n_ensemble, s, groups=groups, countries=countries)
        regional = aggregate_regions(ie, meta)
        levels = project_and_level(growth, ie, meta, regional)
        summary = impact_summary(ie, regional, levels)

        per_member = [
            pd.DataFrame(
                {
                    "member_id": np.repeat(ie.members["member_id"].to_numpy(), len(ie.years)),
                    "unit": unit,
                    "year": np.tile(ie.years, ie.n),
                    "impact_log": imp.ravel(),
                }
            )
            for unit, imp in regional.items()
        ]
        impacts = pd.concat(per_member, ignore_index=True).merge(ie.members, on="member_id")
        _save(manifest, cfg, write_csv(cfg.out / "impacts.csv", impacts))
        _save(manifest, cfg, write_csv(cfg.out / "ensemble_members.csv", ie.members))

        country = ie.country_mean().rename_axis("country").reset_index().melt(id_vars="country", var_name="year", value_name="impact_log")
        country["mean_pct"] = pct(country["impact_log"].to_numpy())
        _save(manifest, cfg, write_csv(cfg.out / "impacts_country.csv", country))
        _save(manifest, cfg, write_csv(cfg.out / "impacts_country_2020.csv", summary.countries_2020))
        _save(manifest, cfg, write_csv(cfg.out / "impact_paths.csv", summary.paths))
        _save(manifest, cfg, write_csv(cfg.out / "regions_2020.csv", summary.regional_2020))

        level_rows = []
        for unit, cf in levels.counterfactual.items():
            level_rows.append(
                pd.DataFrame(
                    {
                        "unit": unit,
                        "year": levels.years,
                        "observed": levels.observed.loc[unit].to_numpy(),
                        "counterfactual_mean": cf.mean(axis=0),
                        "counterfactual_ci90_lo": np.quantile(cf, 0.05, axis=0),
                        "counterfactual_ci90_hi": np.quantile(cf, 0.95, axis=0),
                    }
                )
            )
        _save(manifest, cfg, write_csv(cfg.out / "levels.csv", pd.concat(level_rows, ignore_index=True)))

        headline = {**summary.headline, "spec": cfg.spec.key, "hash": cfg.spec.hash, "gcms": ss.gcms}
        headline["short_history"] = [{"country": c, "years": k} for c, k in levels.short_history]
        _save(manifest, cfg, write_json(cfg.out / "summary.json", headline))
        print_summary(
            "Impact",
            {
                "members": ie.n,
                "countries": len(ie.countries),
                "global 2020 (%)": headline["global_mean_pct"],
                "90% CI (%)": "[{:.3g}, {:.3g}]".format(*headline["global_ci90_pct"]),
                "years lost": headline.get("years_lost_mean", "n/a"),
            },
        )


@app.command("sweep")
def sweep(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
    no_cv: Annotated[bool, typer.Option("--no-cv", help="Skip cross-validation per spec.")] = False,
) -> None:
    """Run every model variant through fit, bootstrap, impacts and CV.

    Args:
        config: JSON run configuration (inputs tfp, meta, weather, scenarios, baseline;
            optional output for the output-growth variant).
        out: Output directory; writes sweep.csv, sweep_summary.json and failed_logs/.
        seed: Run seed.
        workers: Specs evaluated in parallel.
        verbose: Debug logging.
        no_cv: Skip the per-spec cross-validation.
    """
    from agtfp.dataio import first_difference, load_tfp_panel, load_weather_panel
    from agtfp.downscale import ScenarioSet
    from agtfp.errors import SweepFailure
    from agtfp.sweep import Bundle, PipelineSettings, enumerate_models, run_sweep

    with _stage("sweep", config, out, seed, workers, verbose) as (cfg, manifest):
        growth = {"tfp": first_difference(load_tfp_panel(_input(cfg, "tfp"), "tfp"))}
        if cfg.output is not None:
            growth["output"] = first_difference(load_tfp_panel(_input(cfg, "output"), "output"))
        scenarios = None
        scen_path = cfg.scenarios or cfg.out / "scenarios.csv"
        if scen_path.exists():
            scenarios = ScenarioSet.read_csv(scen_path, _input(cfg, "baseline", "baseline.csv"))
        else:
            logger.warning("no scenarios at %s; sweep rows carry no impacts", scen_path)
        bundle = Bundle(
            growth=growth,
            weather=load_weather_panel(_input(cfg, "weather", "weather.csv")),
            meta=_load_meta(cfg),
            scenarios=scenarios,
        )
        settings = PipelineSettings.from_config(cfg)
        if no_cv:
            settings = PipelineSettings(**{**settings.__dict__, "cv": False})
        specs = enumerate_models()
        if "output" in growth:
            specs.append(cfg.spec.replace(dependent=Dependent.output_growth))

        try:
            with progress_bar() as progress:
                task = progress.add_task("Sweeping specs", total=len(specs))
                report = run_sweep(
                    bundle, specs, settings, cfg.seed, workers=cfg.workers, out_dir=cfg.out, progress=lambda: progress.advance(task)
                )
        except SweepFailure as e:
            partial = getattr(e, "report", None)
            if partial is not None:
                partial.to_csv(cfg.out / "sweep.csv")
            raise
        _save(manifest, cfg, report.to_csv(cfg.out / "sweep.csv"))
        summary = report.summary()
        _save(manifest, cfg, write_json(cfg.out / "sweep_summary.json", summary))
        print_summary("Sweep", summary, [f"{h} {k}: {err.splitlines()[0]}" for h, k, err in report.failures])


@app.command("synth")
def synth(
    out: Annotated[Path, typer.Option("--out", help="Bundle directory.")],
    seed: Annotated[int, typer.Option("--seed", help="World seed.")] = 0,
    n_countries: Annotated[int, typer.Option("--n-countries", min=1)] = 20,
    noise_sd: Annotated[float, typer.Option("--noise-sd", min=0.0)] = 0.01,
    trend: Annotated[float, typer.Option("--trend", help="Forced warming, degC per decade.")] = 0.3,
    n_gcms: Annotated[int, typer.Option("--n-gcms", min=1)] = 2,
    heteroskedastic: Annotated[bool, typer.Option("--heteroskedastic")] = False,
    params: Annotated[Path | None, typer.Option("--params", help="JSON file of world parameters.")] = None,
    verbose: VerboseOpt = False,
) -> None:
    """Generate a synthetic world with known truth in the pipeline's input formats.

    Args:
        out: Bundle directory; writes inputs, grids, manifest.json and config.json.
        seed: World seed.
        n_countries: Number of country tiles.
        noise_sd: Standard deviation of the growth noise.
        trend: Warming of forced runs per decade.
        n_gcms: Number of synthetic climate models.
        heteroskedastic: Country-specific noise scales.
        params: JSON world parameters; explicit flags win over it.
        verbose: Debug logging.
    """
    from agtfp.synth import WorldParams, generate_world, write_bundle

    _setup_logging(verbose)
    try:
        raw: dict = {}
        if params is not None:
            if not params.exists():
                raise ConfigError(f"world parameters not found: {params}", key="params")
            raw = json.loads(params.read_text())
        raw.update(
            seed=seed, n_countries=n_countries, noise_sd=noise_sd, trend=trend, n_gcms=n_gcms, heteroskedastic=heteroskedastic
        )
        try:
            p = WorldParams.model_validate(raw)
        except ValueError as e:
            raise ConfigError(f"invalid world parameters: {e}", key="params")
        start = time.perf_counter()
        world = generate_world(p)
        paths = write_bundle(world, out, seed=seed)
        manifest = RunManifest(
            command="synth",
            config_hash=hashlib.sha256(p.model_dump_json().encode()).hexdigest()[:16],
            seed=seed,
        )
        for path in paths.values():
            if path.is_file():
                manifest.add(path, out)
        manifest.timings["total"] = time.perf_counter() - start
        manifest.write(out)
    except AgtfpError as e:
        _fail(e)
    print_summary("Synth", {"countries": p.n_countries, "GCMs": p.n_gcms, "noise sd": p.noise_sd, "bundle": str(out)})


@app.command("report")
def report(
    config: ConfigOpt = None,
    out: OutOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
) -> None:
    """Collate plot-ready CSVs for the figures from the stage outputs under ``--out``.

    Args:
        config: JSON run configuration.
        out: Output directory holding earlier stage outputs; writes figures/.
        seed: Run seed.
        workers: Unused by this stage.
        verbose: Debug logging.
    """
    from agtfp.dataio import load_weather_panel
    from agtfp.report import collate_figures, weather_evolution

    with _stage("report", config, out, seed, workers, verbose) as (cfg, manifest):
        evolution = cfg.out / "weather_evolution.csv"
        weather_path = cfg.weather or cfg.out / "weather.csv"
        if not evolution.exists() and weather_path.exists():
            meta = _load_meta(cfg) if cfg.meta is not None else None
            write_csv(evolution, weather_evolution(load_weather_panel(weather_path), meta))
        written, missing = collate_figures(cfg.out)
        for name in written:
            manifest.add(cfg.out / "figures" / name, cfg.out)
        print_summary("Report", {"figure files": len(written), "missing inputs": len(missing)}, missing)


def main() -> None:
    """Run the app, reporting click usage errors with exit status 1."""
    command = typer.main.get_command(app)
    try:
        code = command.main(standalone_mode=False)
    except click.UsageError as e:
        e.show()
        sys.exit(1)
    except click.Abort:
        err_console.print("Aborted.")
        sys.exit(1)
    sys.exit(code if isinstance(code, int) else 0)


if __name__ == "__main__":
    main()
