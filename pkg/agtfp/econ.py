"""Two-way fixed-effects weighted regressions of TFP growth on weather changes.

Country and year effects are absorbed by alternating weighted demeaning;
coefficients come from weighted least squares on the demeaned data. Also
holds the response curves, coefficient tables and the auxiliary lag and
slope-change tests.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy import stats

from agtfp.config import PRECIP_SCALE, SPLIT_YEAR, Hetero, ModelSpec, Precip
from agtfp.dataio import RegTable
from agtfp.errors import ConvergenceError, DataValidationError, DomainError, RankDeficientError

logger = logging.getLogger(__name__)

FE_TOL = 1e-12
MAX_ITER = 10_000
ABSORBED_TOL = 1e-9
COLLINEAR_TOL = 1e-9
EXTREME_SHARE = 0.10

_LAG_RE = re.compile(r"_l\d+$")


# ---------------------------------------------------------------------------
# Design
# ---------------------------------------------------------------------------


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    country: np.ndarray
    year: np.ndarray
    region: np.ndarray
    names: list[str]
    groups: np.ndarray | None = None
    spec: ModelSpec | None = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_groups(self) -> int:
        return 1 if self.groups is None else 3

    def take(self, idx: np.ndarray) -> "Design":
        return Design(
            X=self.X[idx],
            y=self.y[idx],
            w=self.w[idx],
            country=self.country[idx],
            year=self.year[idx],
            region=self.region[idx],
            names=list(self.names),
            groups=None if self.groups is None else self.groups[idx],
            spec=self.spec,
        )

    def with_columns(self, X: np.ndarray, names: list[str]) -> "Design":
        out = self.take(np.arange(len(self)))
        out.X, out.names = np.asarray(X, dtype=float).reshape(len(self), -1), list(names)
        return out


def weather_terms(spec: ModelSpec, lags: int = 0) -> list[str]:
    """Regressor column names in coefficient order: T terms, then P terms, then each lag."""
    base = [f"dT{p if p > 1 else ''}" for p in range(1, spec.degree + 1)]
    if spec.precip == Precip.include:
        base += [f"dP{p if p > 1 else ''}" for p in range(1, spec.degree + 1)]
    return base + [f"{b}_l{lag}" for lag in range(1, lags + 1) for b in base]


def apply_restriction(frame: pd.DataFrame, spec: ModelSpec) -> pd.DataFrame:
    restriction = spec.restriction
    if restriction == "none":
        return frame
    if spec.dropped_country is not None:
        return frame[frame["country"] != spec.dropped_country]
    if spec.year_range is not None:
        lo, hi = spec.year_range
        return frame[(frame["year"] >= lo) & (frame["year"] <= hi)]
    # coldest10 / hottest10: unweighted country means of seasonal T, ties by country id
    means = frame.groupby("country")["T"].mean()
    order = pd.DataFrame({"t": means.to_numpy(), "country": means.index.to_numpy()})
    ascending = restriction == "coldest10"
    order = order.sort_values(["t", "country"], ascending=[ascending, True], kind="mergesort")
    n_drop = max(1, int(math.floor(EXTREME_SHARE * len(order))))
    excluded = set(order["country"].iloc[:n_drop])
    logger.debug("%s excludes %s", restriction, sorted(excluded))
    return frame[~frame["country"].isin(excluded)]


def build_design(rt: RegTable, spec: ModelSpec | None = None, lags: int = 0) -> Design:
    """Regression design for ``spec`` from an assembled table.

    lat3 interacts every term with the three latitude groups; columns are
    named ``<term>@g<k>``. Regression weights are rescaled to mean one.
    """
    spec = spec or rt.spec
    if lags > rt.lags:
        raise DataValidationError(f"design asks for {lags} lags but the table carries {rt.lags}")
    terms = weather_terms(spec, lags)
    missing = [t for t in terms if t not in rt.frame.columns]
    if missing:
        raise DataValidationError(f"regression table lacks columns {missing} for spec {spec.key}")
    frame = apply_restriction(rt.frame, spec)
    if frame.empty:
        raise DataValidationError(f"empty design after restriction {spec.restriction!r}")

    X = frame[terms].to_numpy(dtype=float)
    names = list(terms)
    groups = None
    if spec.hetero == Hetero.lat3:
        groups = frame["lat_tercile"].to_numpy(dtype=int)
        X = np.hstack([X * (groups == g)[:, None] for g in range(3)])
        names = [f"{t}@g{g}" for g in range(3) for t in terms]
    w = frame["weight"].to_numpy(dtype=float)
    if (w <= 0).any():
        keep = w > 0
        logger.info("build_design: %d rows with zero regression weight removed", int((~keep).sum()))
        frame, X, w = frame[keep], X[keep], w[keep]
        groups = None if groups is None else groups[keep]
        if frame.empty:
            raise DataValidationError("no rows with positive regression weight")
    w = w / w.mean()
    return Design(
        X=X,
        y=frame["dln_tfp"].to_numpy(dtype=float),
        w=w,
        country=frame["country"].to_numpy(),
        year=frame["year"].to_numpy(),
        region=frame["region"].to_numpy(),
        names=names,
        groups=groups,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    beta: pd.Series
    alpha: pd.Series
    theta: pd.Series
    intercept: float
    residuals: np.ndarray
    n: int
    r2_within: float
    iterations: int
    converged: bool
    dropped: list[str] = field(default_factory=list)
    n_groups: int = 1

    def to_dict(self) -> dict:
        return {
            "coefficients": {k: float(v) for k, v in self.beta.items()},
            "n": self.n,
            "r2_within": self.r2_within,
            "iterations": self.iterations,
            "converged": self.converged,
            "dropped": list(self.dropped),
            "groups": self.n_groups,
            "intercept": self.intercept,
        }


def _indicator(codes: np.ndarray, n_levels: int) -> scipy.sparse.csr_matrix:
    n = len(codes)
    return scipy.sparse.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, n_levels))


def _demean(
    Z: np.ndarray, D: Sequence[scipy.sparse.csr_matrix], w: np.ndarray, tol: float, max_iter: int
) -> tuple[np.ndarray, int]:
    """Alternate weighted group demeaning over the indicator sets until the update is negligible."""
    Z = Z.copy()
    wsums = [np.asarray(d.T @ w).ravel() for d in D]
    scale = max(float(np.abs(Z).max(initial=0.0)), 1.0)
    for it in range(1, max_iter + 1):
        change = 0.0
        for d, ws in zip(D, wsums):
            means = (d.T @ (w[:, None] * Z)) / ws[:, None]
            step = d @ means
            Z -= step
            change = max(change, float(np.abs(step).max(initial=0.0)))
        if change <= tol * scale:
            return Z, it
    raise ConvergenceError(f"fixed-effect absorption did not converge in {max_iter} iterations (last change {change:.3g})")


def fit_twoway_fe(
    X: np.ndarray,
    y: np.ndarray,
    country: np.ndarray,
    year: np.ndarray,
    w: np.ndarray | None = None,
    *,
    names: Sequence[str] | None = None,
    tol: float = FE_TOL,
    max_iter: int = MAX_ITER,
    drop_collinear: bool = False,
) -> FitResult:
    """Weighted least squares with country and year effects absorbed.

    Effects are normalized to weighted mean zero with the grand mean in
    ``intercept``. Columns that are absorbed by the effects or collinear with
    earlier columns raise :class:`RankDeficientError`, or are dropped with a
    zero coefficient when ``drop_collinear`` is set.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if len(y) != n or len(w) != n or len(country) != n or len(year) != n:
        raise DataValidationError("X, y, weights and ids must have the same number of rows")
    if (w <= 0).any() or not np.isfinite(w).all():
        raise DomainError("regression weights must be positive and finite")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DataValidationError("non-finite values in the regression data")

    c_codes, c_labels = pd.factorize(np.asarray(country), sort=True)
    t_codes, t_labels = pd.factorize(np.asarray(year), sort=True)
    if len(c_labels) < 1 or len(t_labels) < 1:
        raise DataValidationError("empty regression")
    D = [_indicator(c_codes, len(c_labels)), _indicator(t_codes, len(t_labels))]

    Z, iterations = _demean(np.column_stack([y, X]), D, w, tol, max_iter)
    y_t, X_t = Z[:, 0], Z[:, 1:]
    sw = np.sqrt(w)
    Xs, ys = X_t * sw[:, None], y_t * sw

    raw_norm = np.linalg.norm(X * sw[:, None], axis=0)
    dm_norm = np.linalg.norm(Xs, axis=0)
    absorbed = dm_norm <= ABSORBED_TOL * np.maximum(raw_norm, 1e-300)
    keep = np.flatnonzero(~absorbed)
    collinear = [names[j] for j in np.flatnonzero(absorbed)]
    if len(keep):
        _, R, piv = scipy.linalg.qr(Xs[:, keep], mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int((diag > COLLINEAR_TOL * diag[0]).sum()) if diag[0] > 0 else 0
        if rank < len(keep):
            collinear += [names[keep[j]] for j in piv[rank:]]
            keep = np.sort(keep[piv[:rank]])
    if collinear:
        if not drop_collinear:
            raise RankDeficientError(collinear)
        logger.info("dropping collinear columns %s", collinear)

    beta = np.zeros(p)
    if len(keep):
        sol, *_ = scipy.linalg.lstsq(Xs[:, keep], ys)
        beta[keep] = sol
    resid = y_t - X_t @ beta

    # effects from the fitted fixed-effect component r - e
    fe_part = (y - X @ beta) - resid
    A = scipy.sparse.hstack([D[0], D[1]]).tocsr()
    coef = scipy.sparse.linalg.lsqr(A.multiply(sw[:, None]).tocsr(), fe_part * sw, atol=1e-15, btol=1e-15, iter_lim=10 * (A.shape[1] + 10))[0]
    a, th = coef[: len(c_labels)], coef[len(c_labels) :]
    a_mean = float(np.average(a[c_codes], weights=w))
    t_mean = float(np.average(th[t_codes], weights=w))

    sst = float(np.sum(w * y_t**2))
    sse = float(np.sum(w * resid**2))
    return FitResult(
        beta=pd.Series(beta, index=names, dtype=float),
        alpha=pd.Series(a - a_mean, index=c_labels),
        theta=pd.Series(th - t_mean, index=t_labels),
        intercept=a_mean + t_mean,
        residuals=resid,
        n=n,
        r2_within=1.0 - sse / sst if sst > 0 else 0.0,
        iterations=iterations,
        converged=True,
        dropped=collinear,
        n_groups=sum(1 for nm in names if nm.startswith("dT@g")) or 1,
    )


def fit_design(design: Design, *, tol: float = FE_TOL, drop_collinear: bool = False) -> FitResult:
    return fit_twoway_fe(
        design.X,
        design.y,
        design.country,
        design.year,
        design.w,
        names=design.names,
        tol=tol,
        drop_collinear=drop_collinear,
    )


def fit_spec(rt: RegTable, spec: ModelSpec | None = None, *, tol: float = FE_TOL) -> FitResult:
    return fit_design(build_design(rt, spec), tol=tol)


# ---------------------------------------------------------------------------
# Response functions
# ---------------------------------------------------------------------------


def _poly_coefs(beta: pd.Series, variable: str, group: int | None) -> np.ndarray:
    suffix = "" if group is None else f"@g{group}"
    coefs = []
    for p in (1, 2, 3):
        name = f"d{variable}{p if p > 1 else ''}{suffix}"
        if name in beta.index:
            coefs.append(float(beta[name]))
        elif p == 1:
            raise DataValidationError(f"no {variable} coefficients in the fit ({name} missing)")
    return np.array(coefs)


def _poly(coefs: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    value = sum(c * x ** (p + 1) for p, c in enumerate(coefs))
    marginal = sum((p + 1) * c * x**p for p, c in enumerate(coefs))
    return np.asarray(value, dtype=float), np.asarray(marginal, dtype=float)


def _scale(variable: str) -> float:
    return PRECIP_SCALE if variable == "P" else 1.0


def response_curve(
    beta: pd.Series,
    variable: str,
    levels: np.ndarray,
    exposure: np.ndarray,
    exposure_weights: np.ndarray | None = None,
    group: int | None = None,
) -> pd.DataFrame:
    """f(x) = b1 x + b2 x^2 (+ b3 x^3), shifted so its exposure-weighted mean is zero.

    ``levels`` and ``exposure`` are in degC for T and mm for P; the marginal
    effect is per degC or per mm.
    """
    if variable not in ("T", "P"):
        raise ValueError("variable must be 'T' or 'P'")
    coefs = _poly_coefs(beta, variable, group)
    scale = _scale(variable)
    exposure = np.asarray(exposure, dtype=float)
    ew = np.ones_like(exposure) if exposure_weights is None else np.asarray(exposure_weights, dtype=float)
    if not len(exposure) or ew.sum() <= 0:
        raise DataValidationError("response curve needs a nonempty exposure distribution")
    f_exp, _ = _poly(coefs, exposure / scale)
    shift = float(np.sum(ew * f_exp) / np.sum(ew))
    x = np.asarray(levels, dtype=float)
    value, marginal = _poly(coefs, x / scale)
    return pd.DataFrame({"level": x, "value": value - shift, "marginal": marginal / scale})


def exposure_histogram(rt: RegTable, variable: str, bins: int = 30) -> pd.DataFrame:
    """Country-year distribution of seasonal levels (degC or mm)."""
    values = rt.frame[variable].to_numpy(dtype=float) * _scale(variable)
    counts, edges = np.histogram(values, bins=bins)
    return pd.DataFrame({"lower": edges[:-1], "upper": edges[1:], "count": counts})


def response_band(
    draws: pd.DataFrame,
    variable: str,
    levels: np.ndarray,
    exposure: np.ndarray,
    exposure_weights: np.ndarray | None = None,
    group: int | None = None,
    estimate: pd.Series | None = None,
) -> pd.DataFrame:
    """Pointwise 90% and 95% bands of centered response curves across bootstrap draws."""
    curves = np.stack(
        [
            response_curve(row, variable, levels, exposure, exposure_weights, group)["value"].to_numpy()
            for _, row in draws.iterrows()
        ]
    )
    out = pd.DataFrame({"level": np.asarray(levels, dtype=float)})
    if estimate is not None:
        out["estimate"] = response_curve(estimate, variable, levels, exposure, exposure_weights, group)["value"]
    out["mean"] = curves.mean(axis=0)
    for q in (0.025, 0.05, 0.95, 0.975):
        out[f"q{q * 100:g}"] = np.quantile(curves, q, axis=0)
    return out


def coefficient_table(fit: FitResult, draws: pd.DataFrame | None = None) -> pd.DataFrame:
    """Estimate, bootstrap standard error and percentile intervals per term."""
    out = pd.DataFrame({"term": fit.beta.index, "estimate": fit.beta.to_numpy()})
    if draws is not None and len(draws):
        d = draws[list(fit.beta.index)]
        out["se"] = d.std(ddof=1).to_numpy() if len(d) > 1 else np.nan
        for label, (lo, hi) in {"90": (0.05, 0.95), "95": (0.025, 0.975)}.items():
            out[f"ci{label}_lo"] = d.quantile(lo).to_numpy()
            out[f"ci{label}_hi"] = d.quantile(hi).to_numpy()
    return out


def split_sample_fits(rt: RegTable, spec: ModelSpec | None = None, split_year: int = SPLIT_YEAR) -> dict[str, FitResult]:
    """Separate fits before and from ``split_year``, keyed by their year span."""
    spec = spec or rt.spec
    years = rt.frame["year"]
    out: dict[str, FitResult] = {}
    for part in (rt.frame[years < split_year], rt.frame[years >= split_year]):
        if part.empty:
            raise DataValidationError(f"split at {split_year} leaves an empty period")
        sub = RegTable(part, rt.spec, rt.drop_log, rt.lags)
        out[f"{int(part['year'].min())}-{int(part['year'].max())}"] = fit_spec(sub, spec)
    return out


# ---------------------------------------------------------------------------
# Auxiliary tests
# ---------------------------------------------------------------------------


@dataclass
class LagTestResult:
    variable: str
    lags: int
    sums: dict[str, float]
    statistic: float
    df: int
    p_value: float


def cumulative_lag_test(
    rt: RegTable,
    spec: ModelSpec | None = None,
    *,
    B: int = 500,
    seed: int = 0,
    workers: int = 1,
) -> list[LagTestResult]:
    """Wald test that contemporaneous plus lagged coefficients sum to zero, per weather variable.

    Coefficients of each polynomial term are summed over lags 0..L; the
    covariance of the sums comes from the year-by-region block bootstrap.
    """
    from agtfp.inference import bootstrap_design

    spec = spec or rt.spec
    L = rt.lags
    n_years = rt.frame["year"].nunique()
    if L >= n_years:
        raise DomainError(f"{L} lags exceed the {n_years} years of available history")
    design = build_design(rt, spec, lags=L)
    fit = fit_design(design)
    ens = bootstrap_design(design, B=B, seed=seed, workers=workers)

    keys = [_LAG_RE.sub("", n) for n in design.names]
    unique_keys = list(dict.fromkeys(keys))
    M = np.array([[1.0 if k == u else 0.0 for k in keys] for u in unique_keys])
    point = M @ fit.beta.to_numpy()
    draws = ens.draws[design.names].to_numpy() @ M.T

    results = []
    for var in ("T", "P"):
        idx = [i for i, k in enumerate(unique_keys) if k.startswith(f"d{var}")]
        if not idx:
            continue
        s = point[idx]
        V = np.atleast_2d(np.cov(draws[:, idx], rowvar=False, ddof=1))
        stat = float(s @ np.linalg.pinv(V) @ s)
        df = len(idx)
        results.append(
            LagTestResult(
                variable=var,
                lags=L,
                sums={unique_keys[i]: float(point[i]) for i in idx},
                statistic=stat,
                df=df,
                p_value=float(stats.chi2.sf(stat, df)),
            )
        )
    return results


@dataclass
class SlopeTestResult:
    split_year: int
    estimate: float
    p_value: float
    n_before: int
    n_after: int
    draws: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


def slope_change_test(
    rt: RegTable,
    spec: ModelSpec | None = None,
    split_year: int = SPLIT_YEAR,
    *,
    B: int = 500,
    seed: int = 0,
    workers: int = 1,
) -> SlopeTestResult:
    """Does the linear temperature slope change from ``split_year`` on?

    Fits dT and dT x post (plus the precipitation terms of ``spec``) and takes
    the two-sided percentile-of-zero p-value of the interaction from the block
    bootstrap.
    """
    from agtfp.inference import bootstrap_design

    spec = spec or rt.spec
    base = build_design(rt, spec.replace(hetero=Hetero.pooled, restriction="none"))
    post = base.year >= split_year
    if post.all() or not post.any():
        raise DataValidationError(f"split at {split_year} leaves an empty period")
    dT = base.X[:, base.names.index("dT")]
    cols = [dT, dT * post]
    names = ["dT", "dT_post"]
    for j, name in enumerate(base.names):
        if name.startswith("dP"):
            cols.append(base.X[:, j])
            names.append(name)
    design = base.with_columns(np.column_stack(cols), names)
    fit = fit_design(design)
    ens = bootstrap_design(design, B=B, seed=seed, workers=workers)
    b = ens.draws["dT_post"].to_numpy()
    p = min(1.0, 2.0 * min(float(np.mean(b <= 0)), float(np.mean(b >= 0))))
    return SlopeTestResult(split_year, float(fit.beta["dT_post"]), p, int((~post).sum()), int(post.sum()), b)
