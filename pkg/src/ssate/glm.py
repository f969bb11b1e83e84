"""Penalized generalized linear models.

Two solvers back every model fit in the package:

* :func:`fit_ridge_glm` solves the ridge-penalized score equation
  ``sum_i w_i z_i (y_i - g(gamma'z_i)) / sum_i w_i - lam * gamma_pen = 0``
  by damped Newton iterations.
* :func:`fit_adaptive_lasso` minimizes the weighted mean negative
  log-likelihood plus ``lam * sum_j |u_j| / |w_j|`` with ridge pilot weights
  ``w_j``, by proximal Newton steps whose inner problem is solved with cyclic
  coordinate descent.

Observation weights enter every loss as a weighted mean, so unit weights give
the ordinary fit and integer weights give the fit on the expanded multiset.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit
from scipy import linalg
from scipy.special import expit, logit, xlogy

from .errors import InputError

ETA_CLAMP = 30.0
MAX_ITER = 200
TOL = 1e-8
N_LAMBDA = 50


@dataclass(frozen=True)
class LinkSpec:
    """Inverse link ``g``, its derivative and the unit deviance."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("identity", "logistic"):
            raise InputError(f"unknown link {self.kind!r}; expected 'identity' or 'logistic'")

    @property
    def is_logistic(self) -> bool:
        return self.kind == "logistic"

    def inverse(self, eta):
        if self.kind == "identity":
            return np.asarray(eta, dtype=float)
        return expit(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))

    def derivative(self, eta):
        if self.kind == "identity":
            return np.ones_like(np.asarray(eta, dtype=float))
        mu = self.inverse(eta)
        return mu * (1.0 - mu)

    def link(self, mu):
        """The link itself, ``g^{-1}``; logistic values are clamped to ``|eta| <= 30``."""
        if self.kind == "identity":
            return np.asarray(mu, dtype=float)
        lo, hi = expit(-ETA_CLAMP), expit(ETA_CLAMP)
        return logit(np.clip(mu, lo, hi))

    def unit_deviance(self, y, mu):
        y = np.asarray(y, dtype=float)
        if self.kind == "identity":
            return (y - mu) ** 2
        return 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)))


IDENTITY = LinkSpec("identity")
LOGISTIC = LinkSpec("logistic")


def get_link(link: LinkSpec | str) -> LinkSpec:
    if isinstance(link, LinkSpec):
        return link
    return LinkSpec(str(link))


@dataclass
class GlmFit:
    coefficients: np.ndarray
    lam: float
    converged: bool
    objective_trace: list = field(default_factory=list)
    support: tuple = ()
    link: str = "logistic"
    iterations: int = 0
    score_norm: float = float("nan")
    penalty_factors: np.ndarray | None = None
    pilot: "GlmFit | None" = None
    criterion: dict = field(default_factory=dict)

    def linear_predictor(self, design) -> np.ndarray:
        design = np.asarray(design, dtype=float)
        if design.shape[1] != self.coefficients.shape[0]:
            raise InputError(
                f"design has {design.shape[1]} columns but the fit has "
                f"{self.coefficients.shape[0]} coefficients"
            )
        return design @ self.coefficients

    def predict(self, design) -> np.ndarray:
        return get_link(self.link).inverse(self.linear_predictor(design))


@dataclass(frozen=True)
class PenaltyGrid:
    values: tuple
    selection: str = "cv_deviance"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise InputError("penalty grid is empty")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise InputError("penalty grid values must be finite and nonnegative")
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise InputError("penalty grid must be strictly decreasing")
        if self.selection not in ("cv_deviance", "modified_bic"):
            raise InputError(f"unknown selection rule {self.selection!r}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def log_spaced(cls, scale: float, n: int = N_LAMBDA, selection: str = "cv_deviance"):
        scale = float(scale)
        if not scale > 0 or not math.isfinite(scale):
            scale = 1.0
        return cls(tuple(np.logspace(np.log10(10.0 * scale), np.log10(1e-4 * scale), n)), selection)


# ---------------------------------------------------------------------------
# input handling


def _prepare(design, response, weights):
    Z = np.ascontiguousarray(design, dtype=float)
    y = np.asarray(response, dtype=float).reshape(-1)
    if Z.ndim != 2:
        raise InputError("design must be a 2-d matrix")
    n, p = Z.shape
    if n == 0:
        raise InputError("design has no rows")
    if y.shape[0] != n:
        raise InputError(f"response length {y.shape[0]} does not match {n} design rows")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise InputError("design and response must be finite")
    if p == 0 or not np.all(Z[:, 0] == 1.0):
        raise InputError("first design column must be the all-ones intercept")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != n or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InputError("observation weights must be finite, nonnegative and one per row")
    total = w.sum()
    if not total > 0:
        raise InputError("observation weights sum to zero")
    return Z, y, w, w / total


def _penalty_mask(p: int, unpenalized: Iterable[int]) -> np.ndarray:
    unpen = set(int(j) for j in unpenalized)
    if 0 not in unpen:
        raise InputError("the intercept (index 0) must be unpenalized")
    if any(j < 0 or j >= p for j in unpen):
        raise InputError("unpenalized index out of range")
    mask = np.ones(p)
    mask[list(unpen)] = 0.0
    return mask


def _solve(H, r):
    # near-singular Hessians (separated data without a penalty) take the least-squares step
    with warnings.catch_warnings():
        warnings.simplefilter("error", linalg.LinAlgWarning)
        try:
            return linalg.solve(H, r, assume_a="pos", check_finite=False)
        except (linalg.LinAlgError, linalg.LinAlgWarning, ValueError):
            pass
    return linalg.lstsq(H, r, check_finite=False)[0]


def _null_start(y, wn, link: LinkSpec, p: int) -> np.ndarray:
    start = np.zeros(p)
    start[0] = float(link.link(np.dot(wn, y)))
    return start


# ---------------------------------------------------------------------------
# ridge


def penalized_score(design, response, link, lam, coefficients, unpenalized=(0,), weights=None):
    """Weighted-mean score minus the ridge term, in the original coordinates."""
    Z, y, _, wn = _prepare(design, response, weights)
    link = get_link(link)
    pen = _penalty_mask(Z.shape[1], unpenalized)
    mu = link.inverse(Z @ coefficients)
    return Z.T @ (wn * (y - mu)) - lam * pen * coefficients


def fit_ridge_glm(
    design,
    response,
    link: LinkSpec | str,
    lam: float,
    unpenalized: Sequence[int] = (0,),
    *,
    weights=None,
    start=None,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> GlmFit:
    """Ridge-penalized GLM by damped Newton.

    Converged means the max-norm of the penalized score is at most ``tol``.
    """
    Z, y, _, wn = _prepare(design, response, weights)
    link = get_link(link)
    lam = float(lam)
    if not (lam >= 0 and math.isfinite(lam)):
        raise InputError(f"penalty must be finite and nonnegative, got {lam}")
    pen = _penalty_mask(Z.shape[1], unpenalized)
    return _ridge_core(Z, y, wn, link, lam, pen, start, tol, max_iter)


def _ridge_core(Z, y, wn, link, lam, pen, start=None, tol=TOL, max_iter=MAX_ITER) -> GlmFit:
    """Ridge solver on validated inputs (``wn`` sums to one)."""
    p = Z.shape[1]
    ZtW = Z.T * wn

    def score_of(g):
        return ZtW @ (y - link.inverse(Z @ g)) - lam * pen * g

    if link.kind == "identity":
        H = ZtW @ Z + np.diag(lam * pen)
        gamma = _solve(H, ZtW @ y)
        score = score_of(gamma)
        trace = []
        it = 0
        while np.max(np.abs(score)) > tol and it < 3:
            gamma = gamma + _solve(H, score)
            score = score_of(gamma)
            it += 1
        resid = y - Z @ gamma
        trace.append(0.5 * float(np.dot(wn, resid * resid)) + 0.5 * lam * float(np.dot(pen, gamma * gamma)))
        snorm = float(np.max(np.abs(score)))
        return GlmFit(gamma, lam, snorm <= tol, trace, tuple(np.flatnonzero(gamma != 0)), link.kind, it + 1, snorm)

    def objective(g):
        mu = link.inverse(Z @ g)
        return 0.5 * float(np.dot(wn, link.unit_deviance(y, mu))) + 0.5 * lam * float(np.dot(pen, g * g))

    gamma = _null_start(y, wn, link, p) if start is None else np.array(start, dtype=float)
    f = objective(gamma)
    trace = [f]
    converged = False
    snorm = float("inf")
    it = 0
    for it in range(1, max_iter + 1):
        eta = Z @ gamma
        mu = link.inverse(eta)
        score = ZtW @ (y - mu) - lam * pen * gamma
        snorm = float(np.max(np.abs(score)))
        if snorm <= tol:
            converged = True
            break
        H = (Z.T * (wn * mu * (1.0 - mu))) @ Z + np.diag(lam * pen)
        step = _solve(H, score)
        t = 1.0
        slack = 1e-12 * max(1.0, abs(f))
        while True:
            cand = gamma + t * step
            fc = objective(cand)
            if fc <= f + slack or t < 1e-10:
                break
            t *= 0.5
        gamma, f = cand, fc
        trace.append(f)
    else:
        score = score_of(gamma)
        snorm = float(np.max(np.abs(score)))
        converged = snorm <= tol
    return GlmFit(gamma, lam, converged, trace, tuple(np.flatnonzero(gamma != 0)), link.kind, it, snorm)


def ridge_grid(design, response, link, unpenalized=(0,), weights=None, n: int = N_LAMBDA) -> PenaltyGrid:
    """Fifty log-spaced penalties from ``10 s`` down to ``1e-4 s``.

    ``s`` is the max-norm of the penalized-coordinate score at the null model,
    divided by the response's standard deviation under the identity link.
    """
    Z, y, _, wn = _prepare(design, response, weights)
    link = get_link(link)
    pen = _penalty_mask(Z.shape[1], unpenalized)
    null = _null_fit(Z, y, wn, link, pen)
    score = Z.T @ (wn * (y - link.inverse(Z @ null)))
    s = float(np.max(np.abs(score * pen), initial=0.0))
    if link.kind == "identity":
        # ridge solutions scale with y at a fixed penalty, so the grid must not
        sd = math.sqrt(float(np.dot(wn, (y - np.dot(wn, y)) ** 2)))
        if sd > 0:
            s /= sd
    return PenaltyGrid.log_spaced(s, n)


def _null_fit(Z, y, wn, link, pen):
    """Fit of the unpenalized columns only; other coefficients zero."""
    keep = np.flatnonzero(pen == 0)
    coef = np.zeros(Z.shape[1])
    if keep.size == 1:
        coef[0] = float(link.link(np.dot(wn, y)))
        return coef
    sub = fit_ridge_glm(Z[:, keep], y, link, 0.0, range(keep.size), weights=wn)
    coef[keep] = sub.coefficients
    return coef


def fold_assignment(n: int, folds: int, seed: int = 0) -> np.ndarray:
    """Row ``i`` goes to fold ``perm[i] % folds`` for a seeded permutation."""
    perm = np.random.default_rng(seed).permutation(n)
    return perm % folds


def cross_validate_ridge(
    design,
    response,
    link: LinkSpec | str,
    grid: PenaltyGrid | Sequence[float] | None = None,
    folds: int = 5,
    *,
    unpenalized: Sequence[int] = (0,),
    weights=None,
    seed: int = 0,
) -> float:
    """Penalty with the smallest mean held-out deviance; ties go to the larger one."""
    Z, y, w, _ = _prepare(design, response, weights)
    link = get_link(link)
    if grid is None:
        grid = ridge_grid(Z, y, link, unpenalized, w)
    elif not isinstance(grid, PenaltyGrid):
        grid = PenaltyGrid(tuple(grid))
    if len(grid.values) == 1:
        return grid.values[0]
    n = Z.shape[0]
    folds = int(folds)
    if folds < 2 or n < folds:
        raise InputError(f"cross-validation needs 2 <= folds <= n (folds={folds}, n={n})")
    pen = _penalty_mask(Z.shape[1], unpenalized)
    fold = fold_assignment(n, folds, seed)
    loss = np.zeros(len(grid.values))
    held_weight = 0.0
    for k in range(folds):
        train = fold != k
        test = ~train
        wt = w[train]
        if not wt.sum() > 0:
            continue
        held_weight += w[test].sum()
        start = None
        Zt, yt, wnt = Z[train], y[train], wt / wt.sum()
        for i, lam in enumerate(grid.values):
            fit = _ridge_core(Zt, yt, wnt, link, float(lam), pen, start)
            start = fit.coefficients
            mu = link.inverse(Z[test] @ fit.coefficients)
            loss[i] += float(np.dot(w[test], link.unit_deviance(y[test], mu)))
    if held_weight > 0:
        loss /= held_weight
    best = 0
    for i in range(1, len(loss)):
        if loss[i] < loss[best]:
            best = i
    return grid.values[best]


# ---------------------------------------------------------------------------
# adaptive lasso


@njit(cache=True)
def _cd_quadratic(H, b, lamvec, beta, tol, max_sweeps):
    """Minimize 0.5 u'Hu - b'u + sum_j lamvec_j |u_j| by cyclic coordinate descent.

    ``beta`` is updated in place.  Returns the number of sweeps used.
    """
    p = b.shape[0]
    r = b - H @ beta
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            hjj = H[j, j]
            if hjj <= 0.0:
                continue
            old = beta[j]
            c = r[j] + hjj * old
            lj = lamvec[j]
            if lj == 0.0:
                new = c / hjj
            elif c > lj:
                new = (c - lj) / hjj
            elif c < -lj:
                new = (c + lj) / hjj
            else:
                new = 0.0
            if new != old:
                delta = new - old
                for k in range(p):
                    r[k] -= H[k, j] * delta
                beta[j] = new
                d = abs(delta) * math.sqrt(hjj)
                if d > max_delta:
                    max_delta = d
        if max_delta <= tol:
            return sweep + 1
    return max_sweeps


def _l1_fit(Z, y, wn, link: LinkSpec, lamvec, start, tol=1e-10, max_iter=MAX_ITER):
    """Weighted L1-penalized GLM with per-coordinate penalties ``lamvec``."""
    gamma = np.array(start, dtype=float)
    ZtW = Z.T * wn
    if link.kind == "identity":
        H = ZtW @ Z
        b = ZtW @ y
        sweeps = _cd_quadratic(H, b, lamvec, gamma, 1e-13, 100000)
        resid = y - Z @ gamma
        f = 0.5 * float(np.dot(wn, resid * resid)) + float(np.dot(lamvec, np.abs(gamma)))
        return gamma, sweeps < 100000, [f], 1

    def objective(g):
        mu = link.inverse(Z @ g)
        return 0.5 * float(np.dot(wn, link.unit_deviance(y, mu))) + float(np.dot(lamvec, np.abs(g)))

    f = objective(gamma)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = link.inverse(Z @ gamma)
        grad = -(ZtW @ (y - mu))
        H = (Z.T * (wn * mu * (1.0 - mu))) @ Z
        b = H @ gamma - grad
        new = gamma.copy()
        _cd_quadratic(H, b, lamvec, new, 1e-13, 100000)
        d = new - gamma
        if np.max(np.abs(d)) <= tol:
            gamma = new
            f = objective(gamma)
            trace.append(f)
            converged = True
            break
        decrease = float(np.dot(grad, d)) + float(np.dot(lamvec, np.abs(new) - np.abs(gamma)))
        t = 1.0
        slack = 1e-12 * max(1.0, abs(f))
        while True:
            cand = gamma + t * d
            fc = objective(cand)
            if fc <= f + 1e-4 * t * decrease + slack or t < 1e-10:
                break
            t *= 0.5
        step_size = t * float(np.max(np.abs(d)))
        gamma, f = cand, fc
        trace.append(f)
        if step_size <= tol:
            converged = True
            break
    return gamma, converged, trace, it


def _information_criterion(y, mu, w, link: LinkSpec, df: int) -> float:
    """Modified BIC: deviance + df log n (identity link: n log(RSS/n) + df log n)."""
    n_eff = float(w.sum())
    dev = float(np.dot(w, link.unit_deviance(y, mu)))
    if link.kind == "identity":
        dev = n_eff * math.log(max(dev / n_eff, 1e-300))
    return dev + df * math.log(n_eff)


def fit_adaptive_lasso(
    design,
    response,
    link: LinkSpec | str,
    grid: PenaltyGrid | Sequence[float] | None = None,
    *,
    weights=None,
    pilot_lambda: float | None = None,
    lam: float | None = None,
    folds: int = 5,
    seed: int = 0,
    unpenalized: Sequence[int] = (0,),
) -> GlmFit:
    """Adaptive LASSO with ridge pilot weights.

    With ``lam`` given the path search is skipped and the fit is computed at
    that penalty; likewise ``pilot_lambda`` skips cross-validation of the
    pilot.  Otherwise the pilot penalty is chosen by :func:`cross_validate_ridge`
    and ``lam`` by the modified BIC over ``grid``.  The final fit always starts
    from the null model, so a fixed-penalty refit reproduces it exactly.
    """
    Z, y, w, wn = _prepare(design, response, weights)
    link = get_link(link)
    n, p = Z.shape
    if n < 2:
        raise InputError("adaptive LASSO needs at least 2 rows")
    pen = _penalty_mask(p, unpenalized)
    unpen = tuple(np.flatnonzero(pen == 0))

    if pilot_lambda is None:
        pilot_lambda = cross_validate_ridge(Z, y, link, None, folds, unpenalized=unpen, weights=w, seed=seed)
    pilot = fit_ridge_glm(Z, y, link, pilot_lambda, unpen, weights=w)
    pw = np.abs(pilot.coefficients)
    penalized = pen > 0
    if penalized.any() and not np.any(pw[penalized] > 0):
        raise InputError("degenerate ridge pilot: every penalized coefficient is zero")

    # columns with a zero pilot weight carry an infinite penalty and stay at zero
    active = ~penalized | (pw > 0)
    cols = np.flatnonzero(active)
    Za = Z[:, cols]
    factors = np.where(penalized, 1.0 / np.where(pw > 0, pw, 1.0), 0.0)
    fa = factors[cols]

    start = _null_start(y, wn, link, cols.size)
    if unpen != (0,):
        null = _null_fit(Za, y, wn, link, (fa > 0).astype(float))
        start = null
    criterion: dict = {}
    if lam is None:
        if grid is None:
            mu0 = link.inverse(Za @ start)
            score = Za.T @ (wn * (y - mu0))
            s = float(np.max(np.abs(score[fa > 0]) / fa[fa > 0], initial=0.0))
            grid = PenaltyGrid.log_spaced(s, selection="modified_bic")
        elif not isinstance(grid, PenaltyGrid):
            grid = PenaltyGrid(tuple(grid), "modified_bic")
        best_lam, best_ic = None, math.inf
        warm = start.copy()
        path_ic = []
        for lv in grid.values:
            coef, _, _, _ = _l1_fit(Za, y, wn, link, lv * fa, warm)
            warm = coef
            df = int(np.count_nonzero((coef != 0) | (fa == 0)))
            ic = _information_criterion(y, link.inverse(Za @ coef), w, link, df)
            path_ic.append(ic)
            if ic < best_ic:
                best_lam, best_ic = lv, ic
        lam = best_lam
        criterion = {"grid": grid.values, "bic": tuple(path_ic)}
    lam = float(lam)
    coef_a, converged, trace, it = _l1_fit(Za, y, wn, link, lam * fa, start)
    coef = np.zeros(p)
    coef[cols] = coef_a
    fit = GlmFit(
        coefficients=coef,
        lam=lam,
        converged=bool(converged and pilot.converged),
        objective_trace=trace,
        support=tuple(int(j) for j in np.flatnonzero((coef != 0) | ~penalized)),
        link=link.kind,
        iterations=it,
        penalty_factors=factors,
        pilot=pilot,
        criterion=criterion,
    )
    return fit
