"""Resampling: year-by-region block bootstrap, placebo reshuffles, k-fold CV by years.

Every draw uses its own RNG substream keyed by (seed, purpose, draw, attempt),
so results are identical for any worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from agtfp.config import ModelSpec
from agtfp.dataio import RegTable
from agtfp.econ import FE_TOL, Design, FitResult, build_design, fit_design, fit_twoway_fe
from agtfp.errors import DataValidationError, NumericalError, RankDeficientError
from agtfp.rng import substream

logger = logging.getLogger(__name__)

REDRAW_FACTOR = 10

OnDraw = Callable[[], None]


class PlaceboMode(str, Enum):
    year = "year"
    country = "country"


def _run_draws(fn: Callable[[int], tuple], n: int, workers: int, on_draw: OnDraw | None) -> list[tuple]:
    """Evaluate ``fn(0..n-1)`` on a thread pool, returning results in draw order."""

    def task(b: int) -> tuple:
        out = fn(b)
        if on_draw is not None:
            on_draw()
        return out

    if workers <= 1:
        return [task(b) for b in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, range(n)))


# ---------------------------------------------------------------------------
# Block bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapEnsemble:
    draws: pd.DataFrame  # index draw_id, one column per coefficient
    seed: int
    redraws: int = 0
    n_blocks: int = 0

    @property
    def B(self) -> int:
        return len(self.draws)

    @property
    def names(self) -> list[str]:
        return list(self.draws.columns)

    def ci(self, level: float = 0.90) -> pd.DataFrame:
        """Percentile interval per coefficient (linear interpolation between order statistics)."""
        a = (1.0 - level) / 2.0
        values = self.draws.to_numpy()
        return pd.DataFrame(
            {
                "lo": np.quantile(values, a, axis=0, method="linear"),
                "hi": np.quantile(values, 1.0 - a, axis=0, method="linear"),
            },
            index=self.draws.columns,
        )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.draws.rename_axis("draw_id").to_csv(path, float_format="%.17g")
        return path

    @classmethod
    def read_csv(cls, path: str | Path, seed: int = 0) -> "BootstrapEnsemble":
        path = Path(path)
        if not path.exists():
            raise DataValidationError(f"bootstrap draws not found: {path}")
        draws = pd.read_csv(path, index_col="draw_id")
        if draws.empty:
            raise DataValidationError(f"{path}: no bootstrap draws")
        return cls(draws=draws, seed=seed)


def _blocks(design: Design) -> list[np.ndarray]:
    keys = pd.Series(design.year).astype(str) + "|" + pd.Series(design.region).astype(str)
    codes, uniques = pd.factorize(keys, sort=True)
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(len(uniques) + 1))
    return [order[bounds[i] : bounds[i + 1]] for i in range(len(uniques))]


def bootstrap_design(
    design: Design,
    B: int = 500,
    seed: int = 0,
    *,
    workers: int = 1,
    tol: float = FE_TOL,
    on_draw: OnDraw | None = None,
) -> BootstrapEnsemble:
    """Refit on ``B`` resamples of year-by-region blocks drawn with replacement.

    Each resample draws as many blocks as exist. Rank-deficient resamples are
    redrawn; more than ``10 * B`` redraws in total is a numerical failure.
    """
    blocks = _blocks(design)
    n_blocks = len(blocks)
    cap = REDRAW_FACTOR * B

    def one(b: int) -> tuple[np.ndarray, int]:
        for attempt in range(cap + 1):
            rng = substream(seed, "bootstrap", b, attempt)
            picks = rng.integers(0, n_blocks, size=n_blocks)
            idx = np.concatenate([blocks[i] for i in picks])
            try:
                fit = fit_design(design.take(idx), tol=tol)
            except RankDeficientError:
                continue
            return fit.beta.to_numpy(), attempt
        return np.full(len(design.names), np.nan), cap + 1

    results = _run_draws(one, B, workers, on_draw)
    redraws = sum(r for _, r in results)
    if redraws > cap:
        raise NumericalError(f"bootstrap needed {redraws} redraws of rank-deficient resamples (cap {cap})")
    if redraws:
        logger.info("bootstrap: %d rank-deficient resamples redrawn", redraws)
    draws = pd.DataFrame(np.vstack([beta for beta, _ in results]), columns=design.names)
    draws.index.name = "draw_id"
    return BootstrapEnsemble(draws=draws, seed=seed, redraws=redraws, n_blocks=n_blocks)


def block_bootstrap(
    rt: RegTable,
    spec: ModelSpec | None = None,
    B: int = 500,
    seed: int = 0,
    *,
    workers: int = 1,
    tol: float = FE_TOL,
    on_draw: OnDraw | None = None,
) -> BootstrapEnsemble:
    return bootstrap_design(build_design(rt, spec), B, seed, workers=workers, tol=tol, on_draw=on_draw)


# ---------------------------------------------------------------------------
# Placebo reshuffles
# ---------------------------------------------------------------------------


@dataclass
class PlaceboDistribution:
    mode: PlaceboMode
    draws: pd.DataFrame
    estimate: pd.Series
    seed: int
    redraws: int = 0

    @property
    def R(self) -> int:
        return len(self.draws)

    @property
    def percentile(self) -> pd.Series:
        """Share (in percent) of placebo coefficients below the sample estimate."""
        return (self.draws.lt(self.estimate, axis=1)).mean() * 100.0

    @property
    def p_value(self) -> pd.Series:
        below = self.draws.le(self.estimate, axis=1).mean()
        above = self.draws.ge(self.estimate, axis=1).mean()
        return np.minimum(1.0, 2.0 * np.minimum(below, above))

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "estimate": self.estimate,
                "placebo_mean": self.draws.mean(),
                "percentile": self.percentile,
                "p_value": self.p_value,
            }
        )


def _permuted_rows(design: Design, mode: PlaceboMode, perm: dict) -> tuple[np.ndarray, np.ndarray]:
    """Target rows keeping their outcome, and the rows their weather is taken from."""
    lookup = {(c, y): i for i, (c, y) in enumerate(zip(design.country, design.year))}
    targets, sources = [], []
    for i, (c, y) in enumerate(zip(design.country, design.year)):
        key = (c, perm[y]) if mode == PlaceboMode.year else (perm[c], y)
        j = lookup.get(key)
        if j is not None:
            targets.append(i)
            sources.append(j)
    return np.asarray(targets, dtype=int), np.asarray(sources, dtype=int)


def placebo_test(
    rt: RegTable,
    spec: ModelSpec | None = None,
    mode: PlaceboMode | str = PlaceboMode.year,
    R: int = 10_000,
    seed: int = 0,
    *,
    workers: int = 1,
    tol: float = FE_TOL,
    force_identity: bool = False,
    on_draw: OnDraw | None = None,
) -> PlaceboDistribution:
    """Refit with the weather side reshuffled across years (one permutation for all
    countries) or across countries; the identity permutation is never used unless
    ``force_identity`` is set."""
    mode = PlaceboMode(mode)
    design = build_design(rt, spec)
    return placebo_design(design, mode, R, seed, workers=workers, tol=tol, force_identity=force_identity, on_draw=on_draw)


def placebo_design(
    design: Design,
    mode: PlaceboMode | str,
    R: int,
    seed: int,
    *,
    workers: int = 1,
    tol: float = FE_TOL,
    force_identity: bool = False,
    on_draw: OnDraw | None = None,
) -> PlaceboDistribution:
    mode = PlaceboMode(mode)
    labels = np.unique(design.year if mode == PlaceboMode.year else design.country)
    if len(labels) < 3:
        raise DataValidationError(f"placebo by {mode.value} needs at least 3 distinct {mode.value}s, got {len(labels)}")
    estimate = fit_design(design, tol=tol).beta
    cap = REDRAW_FACTOR * R

    def one(r: int) -> tuple[np.ndarray, int]:
        for attempt in range(cap + 1):
            if force_identity:
                shuffled = labels
            else:
                shuffled = substream(seed, "placebo", mode.value, r, attempt).permutation(labels)
                if np.array_equal(shuffled, labels):
                    continue
            targets, sources = _permuted_rows(design, mode, dict(zip(labels, shuffled)))
            if not len(targets):
                continue
            sub = design.take(targets)
            sub.X = design.X[sources]
            try:
                return fit_design(sub, tol=tol).beta.to_numpy(), attempt
            except RankDeficientError:
                continue
        return np.full(len(design.names), np.nan), cap + 1

    results = _run_draws(one, R, workers, on_draw)
    redraws = sum(r for _, r in results)
    if redraws > cap:
        raise NumericalError(f"placebo needed {redraws} redraws (cap {cap})")
    draws = pd.DataFrame(np.vstack([beta for beta, _ in results]), columns=design.names)
    draws.index.name = "draw_id"
    return PlaceboDistribution(mode=mode, draws=draws, estimate=estimate, seed=seed, redraws=redraws)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CvResult:
    k: int
    mse: float
    mse_null: float
    folds: list[list[int]] = field(default_factory=list)

    @property
    def reduction(self) -> float:
        return (self.mse_null - self.mse) / self.mse_null if self.mse_null > 0 else 0.0


def _predict(fit: FitResult, design: Design, train_years: np.ndarray, train_w: np.ndarray, test: np.ndarray) -> np.ndarray:
    theta_train = fit.theta.reindex(train_years).to_numpy()
    theta_bar = float(np.average(theta_train, weights=train_w))
    alpha = fit.alpha.reindex(design.country[test]).fillna(0.0).to_numpy()
    return fit.intercept + alpha + theta_bar + design.X[test] @ fit.beta.to_numpy()


def cv_design(design: Design, k: int = 10, seed: int = 0, *, tol: float = FE_TOL) -> CvResult:
    years = np.unique(design.year)
    if k > len(years):
        raise DataValidationError(f"k={k} folds exceed the {len(years)} distinct years")
    if k < 2:
        raise DataValidationError("cross-validation needs at least 2 folds")
    shuffled = substream(seed, "cv").permutation(years)
    folds = [sorted(int(y) for y in f) for f in np.array_split(shuffled, k)]
    null = design.with_columns(np.empty((len(design), 0)), [])

    sse = sse0 = wsum = 0.0
    for fold in folds:
        test = np.isin(design.year, fold)
        train = ~test
        pieces = []
        for d in (design, null):
            fit = fit_twoway_fe(
                d.X[train], d.y[train], d.country[train], d.year[train], d.w[train],
                names=d.names, tol=tol, drop_collinear=True,
            )
            pieces.append(_predict(fit, d, d.year[train], d.w[train], np.flatnonzero(test)))
        e, e0 = design.y[test] - pieces[0], design.y[test] - pieces[1]
        w = design.w[test]
        sse += float(np.sum(w * e**2))
        sse0 += float(np.sum(w * e0**2))
        wsum += float(np.sum(w))
    return CvResult(k=k, mse=sse / wsum, mse_null=sse0 / wsum, folds=folds)


def kfold_cv(rt: RegTable, spec: ModelSpec | None = None, k: int = 10, seed: int = 0, *, tol: float = FE_TOL) -> CvResult:
    """Out-of-sample MSE reduction of the weather model over the fixed-effects-only model,
    with years held out together."""
    return cv_design(build_design(rt, spec), k, seed, tol=tol)
