"""Average treatment effect estimators.

``ss_dr`` is the semi-supervised doubly-robust estimator: robust imputations
from a utility-augmented spline model, weighted by the double-index
propensity score over all rows.  The remaining estimators are the usual
complete-case comparators (``cc_*``) and two alternatives that also use the
unlabeled rows (``ss_naive``, ``ss_prepost``).

Every estimator accepts observation weights, so the same code serves the point
estimate (unit weights) and perturbation or bootstrap replicates.  Penalty
levels picked during a point fit are recorded in a tuning map; a replicate run
with that map reuses them instead of re-selecting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import ESTIMATORS, Dataset, ModelConfig
from .dips import DipsFit, fit_dips, fit_outcome_model, fit_ps_model, outcome_design, ps_design
from .errors import EstimationError, InputError
from .glm import GlmFit, cross_validate_ridge, fit_ridge_glm, get_link
from .imputation import (
    build_imputation_basis,
    build_imputation_design,
    fit_imputation,
    impute_design,
    utility_covariate,
)


@dataclass
class EstimateReport:
    kind: str
    delta: float
    mu1: float
    mu0: float
    diagnostics: dict = field(default_factory=dict)


class FitContext:
    """Data, configuration, weights and shared nuisance fits for one run.

    ``tuning=None`` selects penalties and records them in ``self.tuning``;
    passing a recorded map reuses every entry it contains.
    """

    def __init__(self, data: Dataset, config: ModelConfig, weights=None, tuning: dict | None = None):
        self.config = config
        N = data.N
        if weights is None:
            weights = np.ones(N)
        else:
            weights = np.asarray(weights, dtype=float).reshape(-1)
            if weights.shape[0] != N or np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise InputError("weights must be finite, nonnegative and one per row")
            if not weights.sum() > 0:
                raise InputError("weights are all zero")
        # every fit sees the rows in a canonical order, so estimates do not depend on input order
        order = canonical_order(data, weights)
        self.data = data.take(order)
        self.weights = weights[order]
        self.replicate = tuning is not None
        self.tuning = dict(tuning) if tuning is not None else {}
        self._alpha: GlmFit | None = None
        self._beta: GlmFit | None = None

    # penalties -------------------------------------------------------------

    def ridge_lambda(self, key: str, design, y, link, weights, unpenalized=(0,)) -> float:
        if key not in self.tuning:
            folds = min(self.config.cv_folds, design.shape[0])
            if folds < 2:
                raise EstimationError(f"{key}: too few rows for cross-validation")
            self.tuning[key] = cross_validate_ridge(
                design, y, link, None, folds, unpenalized=unpenalized, weights=weights, seed=self.config.seed
            )
        return self.tuning[key]

    # nuisance fits -----------------------------------------------------------

    @property
    def alpha(self) -> GlmFit:
        if self._alpha is None:
            fit = fit_ps_model(
                self.data,
                self.config,
                self.weights,
                pilot_lambda=self.tuning.get("alpha_pilot"),
                lam=self.tuning.get("alpha_lambda"),
            )
            self.tuning.setdefault("alpha_pilot", fit.pilot.lam)
            self.tuning.setdefault("alpha_lambda", fit.lam)
            self.tuning.setdefault("alpha_coef", fit.coefficients.copy())
            self._alpha = fit
        return self._alpha

    @property
    def beta(self) -> GlmFit:
        if self._beta is None:
            fit = fit_outcome_model(
                self.data,
                self.config,
                self.weights,
                pilot_lambda=self.tuning.get("beta_pilot"),
                lam=self.tuning.get("beta_lambda"),
            )
            self.tuning.setdefault("beta_pilot", fit.pilot.lam)
            self.tuning.setdefault("beta_lambda", fit.lam)
            self._beta = fit
        return self._beta

    @property
    def ps_param(self) -> np.ndarray:
        """Truncated parametric propensity ``pi(x; alpha_hat)`` for every row."""
        eps = self.config.ps_truncation
        return np.clip(self.alpha.predict(ps_design(self.data.x)), eps, 1.0 - eps)

    def outcome_param(self, k: int) -> np.ndarray:
        """Baseline outcome model ``mu_k(x; beta_hat)`` for every row."""
        return self.beta.predict(outcome_design(self.data.x, np.full(self.data.N, float(k))))

    @property
    def labeled_weights(self) -> np.ndarray:
        return self.weights[self.data.labeled]


# ---------------------------------------------------------------------------
# shared pieces


def canonical_order(data: Dataset, weights) -> np.ndarray:
    """Row order determined by row contents alone (ties are identical rows)."""
    keys = [np.asarray(weights, dtype=float)]
    keys += [data.w[:, j] for j in range(data.p_w - 1, -1, -1)]
    keys += [data.x[:, j] for j in range(data.p_x - 1, -1, -1)]
    keys += [data.t, data.y]
    return np.lexsort(keys)


def hajek_means(values, treatment, ps, weights):
    """Normalized inverse-propensity weighted means of ``values`` in each arm."""
    t = np.asarray(treatment, dtype=float)
    g = np.asarray(weights, dtype=float)
    w1 = g * t / ps
    w0 = g * (1.0 - t) / (1.0 - ps)
    s1, s0 = w1.sum(), w0.sum()
    if not (s1 > 0 and s0 > 0):
        raise EstimationError("an arm has no (positively weighted) rows")
    return float(np.dot(w1, values) / s1), float(np.dot(w0, values) / s0), w1, w0


def effective_size(w) -> float:
    w = np.asarray(w, dtype=float)
    s2 = float(np.dot(w, w))
    return float(w.sum() ** 2 / s2) if s2 > 0 else 0.0


def _check_arms(t, g, where: str):
    if not (np.dot(g, t) > 0 and np.dot(g, 1.0 - t) > 0):
        raise EstimationError(f"{where}: an arm is empty")


def _report(kind, mu1, mu0, **diag) -> EstimateReport:
    return EstimateReport(kind, mu1 - mu0, mu1, mu0, diag)


def _standardized(M):
    """Columns of ``M`` centred and scaled by their pooled moments; constant ones dropped."""
    M = np.asarray(M, dtype=float)
    mean = M.mean(axis=0)
    sd = M.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(mean))
    return (M[:, keep] - mean[keep]) / sd[keep]


def _with_intercept(*blocks) -> np.ndarray:
    n = blocks[0].shape[0]
    return np.column_stack([np.ones(n)] + [np.asarray(b, dtype=float).reshape(n, -1) for b in blocks])


def _mle_predict(key: str, design, y, rows, link, weights) -> tuple[np.ndarray, bool]:
    """Unpenalized main-effects fit on ``rows``; predictions for all rows and the convergence flag.

    Under complete separation the clamped linear predictor keeps the fitted values finite.
    """
    g = weights[rows]
    if rows.sum() < 2 or not g.sum() > 0:
        raise EstimationError(f"{key}: fewer than 2 rows to fit")
    fit = fit_ridge_glm(design[rows], y[rows], link, 0.0, (0,), weights=g)
    return get_link(link).inverse(design @ fit.coefficients), bool(fit.converged)


# ---------------------------------------------------------------------------
# SS_DR


@dataclass
class SsDrFit:
    dips: DipsFit
    utility: np.ndarray
    imputed: np.ndarray
    design: np.ndarray
    imputation: object
    report: EstimateReport


def fit_ss_dr(ctx: FitContext) -> SsDrFit:
    data, cfg = ctx.data, ctx.config
    g = ctx.weights
    _check_arms(data.t, g, "ss_dr")
    L = data.labeled
    if not L.any():
        raise InputError("the labeled subset is empty: ss_dr needs at least one labeled row (nonempty y)")

    direction = None
    alpha = ctx.alpha if not (ctx.replicate and cfg.ps_perturbation == "printed") else None
    if alpha is None:
        # replicate under the printed scheme: the propensity direction stays at its point value
        coef = np.asarray(ctx.tuning["alpha_coef"])
        alpha = GlmFit(coef, ctx.tuning["alpha_lambda"], True, link="logistic")
        direction = coef[1 : 1 + data.p_x]
    dips = fit_dips(data, cfg, g, alpha=alpha, beta=ctx.beta, alpha_direction=direction)
    pi_hat = dips.pi_hat

    U = utility_covariate(data.t, pi_hat)
    V = data.v
    if "imputation_basis" not in ctx.tuning:
        ctx.tuning["imputation_basis"] = build_imputation_basis(V, U, cfg.spline_knots, cfg.imputation_interactions)
    basis = ctx.tuning["imputation_basis"]
    Z = build_imputation_design(V, data.t, U, basis)
    link = get_link(cfg.link_imputation)
    gL = g[L]
    lam = ctx.ridge_lambda("gamma_lambda", Z[L], data.y[L], link, gL)
    imp = fit_imputation(Z[L], data.y[L], link, lam, basis=basis, weights=gL)
    y_dag = impute_design(imp, Z)

    mu1, mu0, w1, w0 = hajek_means(y_dag, data.t, pi_hat, g)
    report = _report(
        "ss_dr",
        mu1,
        mu0,
        ess_treated=effective_size(w1),
        ess_control=effective_size(w0),
        truncated_low=dips.diagnostics["truncated_low"],
        truncated_high=dips.diagnostics["truncated_high"],
        zero_denominator=dips.diagnostics["zero_denominator"],
        degenerate_arm=dips.diagnostics["degenerate_arm"],
        degenerate_score=dips.diagnostics["degenerate_score"],
        bandwidth=dips.kernel.bandwidth,
        gamma_lambda=float(lam),
        imputation_converged=bool(imp.gamma.converged),
        design_width=int(Z.shape[1]),
        alpha_support=len(dips.alpha.support),
        beta_support=len(dips.beta.support),
    )
    return SsDrFit(dips, U, y_dag, Z, imp, report)


def ss_dr(ctx: FitContext) -> EstimateReport:
    return fit_ss_dr(ctx).report


# ---------------------------------------------------------------------------
# complete-case estimators


def _labeled_arms(ctx: FitContext, kind: str):
    data = ctx.data
    L = data.labeled
    if not L.any():
        raise InputError(f"the labeled subset is empty: {kind} needs labeled rows (nonempty y)")
    t, g = data.t[L], ctx.weights[L]
    if not (np.dot(g, t) > 0 and np.dot(g, 1.0 - t) > 0):
        raise EstimationError(f"{kind}: a treatment arm has no labeled rows")
    return L, t, g


def cc_naive(ctx: FitContext) -> EstimateReport:
    L, t, g = _labeled_arms(ctx, "cc_naive")
    y = ctx.data.y[L]
    mu1 = float(np.dot(g * t, y) / np.dot(g, t))
    mu0 = float(np.dot(g * (1.0 - t), y) / np.dot(g, 1.0 - t))
    return _report("cc_naive", mu1, mu0, n_treated=int(t.sum()), n_control=int((1 - t).sum()))


def cc_ipw(ctx: FitContext) -> EstimateReport:
    L, t, g = _labeled_arms(ctx, "cc_ipw")
    ps = ctx.ps_param
    y = ctx.data.y[L]
    mu1, mu0, w1, w0 = hajek_means(y, t, ps[L], g)
    if ctx.config.cc_ipw_form == "unnormalized":
        # weights divided by the labeled total instead of their own sums
        total = g.sum()
        mu1, mu0 = float(np.dot(w1, y) / total), float(np.dot(w0, y) / total)
    return _report("cc_ipw", mu1, mu0, form=ctx.config.cc_ipw_form,
                   ess_treated=effective_size(w1), ess_control=effective_size(w0),
                   truncated=int(np.count_nonzero((ps <= ctx.config.ps_truncation) | (ps >= 1 - ctx.config.ps_truncation))))


def cc_reg(ctx: FitContext) -> EstimateReport:
    L, t, g = _labeled_arms(ctx, "cc_reg")
    m1, m0 = ctx.outcome_param(1), ctx.outcome_param(0)
    if ctx.config.cc_reg_population == "all":
        rows, gw = slice(None), ctx.weights
    else:
        rows, gw = L, g
    total = gw.sum()
    mu1 = float(np.dot(gw, m1[rows]) / total)
    mu0 = float(np.dot(gw, m0[rows]) / total)
    return _report("cc_reg", mu1, mu0, beta_support=len(ctx.beta.support), population=ctx.config.cc_reg_population)


def cc_dr(ctx: FitContext) -> EstimateReport:
    L, t, g = _labeled_arms(ctx, "cc_dr")
    y = ctx.data.y[L]
    ps = ctx.ps_param[L]
    m1, m0 = ctx.outcome_param(1)[L], ctx.outcome_param(0)[L]
    mu1, mu0 = aipw_means(y, t, ps, m1, m0, g)
    return _report("cc_dr", mu1, mu0, alpha_support=len(ctx.alpha.support), beta_support=len(ctx.beta.support))


# ---------------------------------------------------------------------------
# semi-supervised comparators


def ss_naive(ctx: FitContext) -> EstimateReport:
    """Main-effects regression of Y on (V, T) imputed everywhere, then Hajek IPW."""
    data = ctx.data
    L, _, _ = _labeled_arms(ctx, "ss_naive")
    _check_arms(data.t, ctx.weights, "ss_naive")
    design = _with_intercept(_standardized(data.v), data.t)
    y_imp, converged = _mle_predict("ss_naive", design, data.y, L, ctx.config.link_imputation, ctx.weights)
    ps = ctx.ps_param
    mu1, mu0, w1, w0 = hajek_means(y_imp, data.t, ps, ctx.weights)
    return _report("ss_naive", mu1, mu0, ess_treated=effective_size(w1), ess_control=effective_size(w0),
                   converged=converged)


def ss_prepost(ctx: FitContext) -> EstimateReport:
    """Augmented IPW for the pretest-posttest design with estimated propensities.

    ``mu_k = mean_i[ w_ki {(R_i/rho) Y_i - (R_i/rho - 1) e_k(V_i)} - (w_ki - 1) m_k(X_i) ]``
    with ``w_ki = I(T_i = k) / pi_k(X_i)``, ``rho`` the labeled fraction, ``e_k``
    and ``m_k`` within-arm regressions on V and on X over labeled rows.
    """
    data, cfg = ctx.data, ctx.config
    L, _, _ = _labeled_arms(ctx, "ss_prepost")
    g = ctx.weights
    _check_arms(data.t, g, "ss_prepost")
    ps = ctx.ps_param
    zv = _with_intercept(_standardized(data.v))
    zx = _with_intercept(_standardized(data.x))
    e, m, converged = {}, {}, True
    for k in (1, 0):
        arm = L & (data.t == k)
        e[k], ok_e = _mle_predict(f"ss_prepost e{k}", zv, data.y, arm, cfg.link_outcome, g)
        m[k], ok_m = _mle_predict(f"ss_prepost m{k}", zx, data.y, arm, cfg.link_outcome, g)
        converged = converged and ok_e and ok_m
    mu1, mu0 = prepost_means(data.y, data.t, L, ps, e[1], e[0], m[1], m[0], g)
    return _report("ss_prepost", mu1, mu0, labeled_fraction=float(g[L].sum() / g.sum()),
                   converged=converged)


def aipw_means(y, t, ps, m1, m0, weights=None):
    """Augmented IPW arm means ``mean{T (Y - m1)/ps + m1}`` and its control analogue."""
    y, t, ps, m1, m0 = (np.asarray(a, dtype=float) for a in (y, t, ps, m1, m0))
    g = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    total = g.sum()
    mu1 = float(np.dot(g, t * (y - m1) / ps + m1) / total)
    mu0 = float(np.dot(g, (1.0 - t) * (y - m0) / (1.0 - ps) + m0) / total)
    return mu1, mu0


def prepost_means(y, t, labeled, ps, e1, e0, m1, m0, weights=None):
    """Pretest-posttest arm means; ``y`` is never read on unlabeled rows."""
    t, ps = np.asarray(t, dtype=float), np.asarray(ps, dtype=float)
    L = np.asarray(labeled, dtype=bool)
    g = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    rho = float(g[L].sum() / g.sum())
    R = L.astype(float)
    ry = np.where(L, np.asarray(y, dtype=float), 0.0)
    out = []
    for k, e_k, m_k in ((1, e1, m1), (0, e0, m0)):
        omega = (t == k) / (ps if k == 1 else 1.0 - ps)
        terms = omega * (ry / rho - (R / rho - 1.0) * np.asarray(e_k)) - (omega - 1.0) * np.asarray(m_k)
        out.append(float(np.dot(g, terms) / g.sum()))
    return out[0], out[1]


def efficient_influence(Y, T, ps, xi):
    """``U_pi (Y - xi)`` row by row."""
    Y = np.asarray(Y, dtype=float)
    T = np.asarray(T, dtype=float)
    ps = np.asarray(ps, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if not (Y.shape == T.shape == ps.shape == xi.shape):
        raise InputError("efficient influence inputs must have equal lengths")
    return utility_covariate(T, ps) * (Y - xi)


_ESTIMATORS: dict[str, Callable[[FitContext], EstimateReport]] = {
    "ss_dr": ss_dr,
    "cc_ipw": cc_ipw,
    "cc_reg": cc_reg,
    "cc_dr": cc_dr,
    "ss_naive": ss_naive,
    "ss_prepost": ss_prepost,
    "cc_naive": cc_naive,
}
assert set(_ESTIMATORS) == set(ESTIMATORS)


def estimate(kind: str, ctx: FitContext) -> EstimateReport:
    try:
        fn = _ESTIMATORS[kind]
    except KeyError:
        raise InputError(f"unknown estimator {kind!r}") from None
    return fn(ctx)


def estimate_all(data: Dataset, config: ModelConfig, kinds=ESTIMATORS, weights=None, tuning=None) -> dict:
    """Run several estimators on one shared context; failures are returned as exceptions."""
    ctx = FitContext(data, config, weights, tuning)
    out = {}
    for kind in kinds:
        try:
            out[kind] = estimate(kind, ctx)
        except (EstimationError, InputError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[kind] = exc
    return out
