"""Robustness sweep: every model variant through fit, bootstrap, impacts and CV.

Usage:
    agtfp sweep --config run.json --workers 8

Specs run as independent jobs; each derives its seed from the run seed and
its own hash, so the baseline row equals a standalone baseline run.
"""

from __future__ import annotations

import itertools
import logging
import traceback
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import pandas as pd

from agtfp.config import (
    BASELINE,
    RESTRICTIONS,
    WORLD,
    AggWeights,
    Dependent,
    Form,
    Hetero,
    ModelSpec,
    Precip,
    RegWeights,
    RunConfig,
    TVar,
    Window,
)
from agtfp.counterfactual import (
    ImpactEnsemble,
    ImpactSummary,
    LevelPaths,
    aggregate_regions,
    ensemble_impacts,
    impact_summary,
    pct,
    project_and_level,
)
from agtfp.dataio import CountryMeta, GrowthPanel, RegTable, assemble_panel
from agtfp.downscale import ScenarioSet
from agtfp.econ import FitResult, build_design, fit_design
from agtfp.errors import AgtfpError, SweepFailure
from agtfp.inference import BootstrapEnsemble, CvResult, bootstrap_design, cv_design
from agtfp.rng import derive_seed

logger = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.10


def enumerate_models() -> list[ModelSpec]:
    """The 192 unrestricted combinations followed by the 8 restrictions of the baseline."""
    specs = [
        ModelSpec(tvar=t, precip=p, form=f, reg_weights=rw, agg_weights=aw, window=win, hetero=h)
        for t, p, f, rw, aw, win, h in itertools.product(TVar, Precip, Form, RegWeights, AggWeights, Window, Hetero)
    ]
    specs += [BASELINE.replace(restriction=r) for r in RESTRICTIONS]
    return specs


def spec_seed(seed: int, spec: ModelSpec) -> int:
    return derive_seed(seed, spec.hash)


# ---------------------------------------------------------------------------
# One spec end to end
# ---------------------------------------------------------------------------


@dataclass
class Bundle:
    """Everything a spec needs: growth panels keyed by measure, the seasonal
    weather of every variant, country metadata and scenarios."""

    growth: dict[str, GrowthPanel]
    weather: pd.DataFrame
    meta: CountryMeta
    scenarios: ScenarioSet | None = None


@dataclass(frozen=True)
class PipelineSettings:
    B: int = 500
    n_ensemble: int = 2000
    k: int = 10
    coverage_threshold: float = 0.9
    signed_latitude: bool = False
    tol: float = 1e-12
    workers: int = 1
    cv: bool = True

    @classmethod
    def from_config(cls, cfg: RunConfig, workers: int | None = None) -> "PipelineSettings":
        return cls(
            B=cfg.B,
            n_ensemble=cfg.n_ensemble,
            k=cfg.k,
            coverage_threshold=cfg.coverage_threshold,
            signed_latitude=cfg.signed_latitude,
            tol=cfg.fe_tol,
            workers=cfg.workers if workers is None else workers,
        )


@dataclass
class SpecRun:
    spec: ModelSpec
    seed: int
    table: RegTable
    fit: FitResult
    ensemble: BootstrapEnsemble
    impacts: ImpactEnsemble | None = None
    regional: dict[str, np.ndarray] | None = None
    summary: ImpactSummary | None = None
    levels: LevelPaths | None = None
    cv: CvResult | None = None

    def row(self) -> dict:
        out = {**self.spec.model_dump(mode="json"), "hash": self.spec.hash, "is_baseline": self.spec.is_baseline}
        out["n_obs"] = self.fit.n
        if self.regional is not None:
            world = self.regional[WORLD][:, -1]
            out["global_mean_pct"] = float(pct(self.regional[WORLD].mean(axis=0)[-1]))
            for label, (lo, hi) in {"90": (0.05, 0.95), "95": (0.025, 0.975)}.items():
                out[f"ci{label}_lo"] = float(np.quantile(pct(world), lo))
                out[f"ci{label}_hi"] = float(np.quantile(pct(world), hi))
        out["cv_reduction"] = None if self.cv is None else self.cv.reduction
        return out


def evaluate_spec(
    bundle: Bundle,
    spec: ModelSpec,
    settings: PipelineSettings,
    seed: int,
    *,
    with_levels: bool = False,
    on_draw=None,
) -> SpecRun:
    """Fit, bootstrap, impact ensemble and CV for one spec with its derived seed."""
    measure = "output" if spec.dependent == Dependent.output_growth else "tfp"
    if measure not in bundle.growth:
        raise AgtfpError(f"no {measure} panel for spec {spec.key}")
    s = spec_seed(seed, spec)
    rt = assemble_panel(
        bundle.growth[measure],
        bundle.weather,
        bundle.meta,
        spec,
        coverage_threshold=settings.coverage_threshold,
        signed_latitude=settings.signed_latitude,
    )
    design = build_design(rt, spec)
    fit = fit_design(design, tol=settings.tol)
    ens = bootstrap_design(design, settings.B, s, workers=settings.workers, tol=settings.tol, on_draw=on_draw)
    run = SpecRun(spec=spec, seed=s, table=rt, fit=fit, ensemble=ens)

    if bundle.scenarios is not None:
        groups = None
        if spec.hetero == Hetero.lat3:
            groups = rt.frame.drop_duplicates("country").set_index("country")["lat_tercile"]
        countries = sorted(rt.frame["country"].unique())
        run.impacts = ensemble_impacts(ens, bundle.scenarios, spec, settings.n_ensemble, s, groups=groups, countries=countries)
        run.regional = aggregate_regions(run.impacts, bundle.meta)
        if with_levels:
            run.levels = project_and_level(bundle.growth[measure], run.impacts, bundle.meta, run.regional)
        run.summary = impact_summary(run.impacts, run.regional, run.levels)
    if settings.cv:
        run.cv = cv_design(design, settings.k, s, tol=settings.tol)
    return run


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

_bundle: Bundle | None = None


def init_bundle(bundle: Bundle) -> None:
    """Pool initializer: install the shared bundle in the worker process."""
    global _bundle
    _bundle = bundle


def _evaluate_one(args: tuple[int, ModelSpec, PipelineSettings, int]) -> tuple[int, dict | None, str | None]:
    idx, spec, settings, seed = args
    assert _bundle is not None, "bundle not initialized"
    try:
        return idx, evaluate_spec(_bundle, spec, settings, seed).row(), None
    except Exception as e:
        return idx, None, f"{type(e).__name__}: {e}\n\n{traceback.format_exc()}"


@dataclass
class SweepReport:
    rows: pd.DataFrame
    failures: list[tuple[str, str, str]] = field(default_factory=list)  # (hash, key, error)

    @property
    def unrestricted(self) -> pd.DataFrame:
        ok = self.rows[self.rows["status"] == "ok"]
        return ok[ok["restriction"] == "none"]

    def summary(self) -> dict:
        vals = self.unrestricted["global_mean_pct"].astype(float) if "global_mean_pct" in self.rows else pd.Series(dtype=float)
        return {
            "n_specs": len(self.rows),
            "n_failed": len(self.failures),
            "n_unrestricted": int(len(vals)),
            "mean_pct": float(vals.mean()) if len(vals) else None,
            "sd_pct": float(vals.std(ddof=1)) if len(vals) > 1 else None,
        }

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False, float_format="%.17g")
        return path


def run_sweep(
    bundle: Bundle,
    specs: list[ModelSpec],
    settings: PipelineSettings,
    seed: int,
    *,
    workers: int = 1,
    out_dir: str | Path | None = None,
    progress=None,
) -> SweepReport:
    """Evaluate ``specs`` on a process pool; per-spec failures are isolated.

    Failed specs are written to ``<out_dir>/failed_logs/spec_<hash>.log``; more
    than 10% failures raise :class:`SweepFailure`. ``progress`` is an optional
    callable advanced once per finished spec.
    """
    hashes = [s.hash for s in specs]
    if len(set(hashes)) != len(hashes):
        raise SweepFailure("duplicate specs in the sweep")
    # bootstrap threads inside a spec would oversubscribe the pool
    inner = PipelineSettings(**{**settings.__dict__, "workers": 1})
    tasks = [(i, spec, inner, seed) for i, spec in enumerate(specs)]
    results: dict[int, tuple[dict | None, str | None]] = {}

    if workers <= 1:
        init_bundle(bundle)
        for task in tasks:
            idx, row, err = _evaluate_one(task)
            results[idx] = (row, err)
            if progress is not None:
                progress()
    else:
        with Pool(workers, initializer=init_bundle, initargs=(bundle,)) as pool:
            for idx, row, err in pool.imap_unordered(_evaluate_one, tasks):
                results[idx] = (row, err)
                if progress is not None:
                    progress()

    rows, failures = [], []
    log_dir = Path(out_dir) / "failed_logs" if out_dir is not None else None
    for i, spec in enumerate(specs):
        row, err = results[i]
        if row is None:
            failures.append((spec.hash, spec.key, err or "unknown error"))
            row = {**spec.model_dump(mode="json"), "hash": spec.hash, "is_baseline": spec.is_baseline}
            row["status"] = "failed"
            if log_dir is not None:
                log_dir.mkdir(parents=True, exist_ok=True)
                (log_dir / f"spec_{spec.hash}.log").write_text(f"Spec: {spec.key}\nError: {err}\n")
        else:
            row["status"] = "ok"
        rows.append(row)

    report = SweepReport(pd.DataFrame(rows), failures)
    if failures:
        logger.warning("%d of %d specs failed", len(failures), len(specs))
    if len(failures) > MAX_FAILURE_SHARE * len(specs):
        err = SweepFailure(
            f"{len(failures)} of {len(specs)} specs failed (limit {MAX_FAILURE_SHARE:.0%})",
            failed=",".join(h for h, _, _ in failures[:20]),
        )
        err.report = report
        raise err
    return report
