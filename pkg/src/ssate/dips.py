"""Double-index propensity score.

The parametric propensity direction and the baseline-outcome direction give
two scores per row.  Each is standardized, pushed through the normal CDF, and
the treatment indicator is smoothed over the resulting points in the unit
square with a product of fourth-order (by default) Gaussian-based kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import factorial, ndtr

from .errors import InputError
from .glm import GlmFit, fit_adaptive_lasso


@dataclass(frozen=True)
class KernelSpec:
    """Univariate Gaussian-based kernel of even order ``q >= 4``.

    ``k(u) = P(u^2) phi(u)`` with ``P`` chosen so that moments 1..q-1 vanish;
    for ``q = 4`` this is ``(3 - u^2) / 2 * phi(u)``.
    """

    order: int = 4
    bandwidth: float = 0.1

    def __post_init__(self):
        if self.order < 4 or self.order % 2:
            raise InputError(f"kernel order must be an even integer >= 4, got {self.order}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise InputError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def poly(self) -> np.ndarray:
        """Coefficients of ``P`` in powers of ``u^2`` (constant first)."""
        return gaussian_kernel_poly(self.order)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        u2 = u * u
        val = np.zeros_like(u2)
        for c in self.poly[::-1]:
            val = val * u2 + c
        return val * np.exp(-0.5 * u2) / math.sqrt(2.0 * math.pi)


def gaussian_kernel_poly(order: int) -> np.ndarray:
    """Sum of ``(-1)^k He_{2k}(u) / (2^k k!)`` for ``k < order / 2``, in powers of ``u^2``."""
    m = order // 2
    out = np.zeros(m)
    for k in range(m):
        scale = (-1) ** k / (2.0**k * factorial(k))
        # He_{2k}(u) = sum_j (-1)^j (2k)! / (j! (2k-2j)! 2^j) u^{2k-2j}
        for j in range(k + 1):
            c = (-1) ** j * factorial(2 * k) / (factorial(j) * factorial(2 * k - 2 * j) * 2.0**j)
            out[k - j] += scale * c
    return out


@dataclass
class ScorePairs:
    raw: np.ndarray  # N x 2
    transformed: np.ndarray  # N x 2, inside (0, 1)
    degenerate: tuple = (False, False)


@dataclass
class DipsFit:
    alpha: GlmFit
    beta: GlmFit
    pi_hat: np.ndarray
    kernel: KernelSpec
    scores: ScorePairs | None = None
    diagnostics: dict = field(default_factory=dict)


def bivariate_scores(X, alpha1, beta1, weights=None) -> ScorePairs:
    """Project ``X`` on both directions, standardize and apply the normal CDF.

    Standardization uses the (weighted) mean and the sample standard deviation
    with divisor ``sum(w) - 1``.  A coordinate with zero spread maps to 0.5.
    """
    X = np.asarray(X, dtype=float)
    a = np.asarray(alpha1, dtype=float).reshape(-1)
    b = np.asarray(beta1, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[1] != a.shape[0] or X.shape[1] != b.shape[0]:
        raise InputError("score directions must have one entry per covariate column")
    raw = np.column_stack([X @ a, X @ b])
    N = raw.shape[0]
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    out = np.empty_like(raw)
    flags = []
    for c in range(2):
        s = raw[:, c]
        m = float(np.dot(w, s)) / total
        dev = s - m
        var = float(np.dot(w, dev * dev)) / (total - 1.0) if total > 1.0 else 0.0
        sd = math.sqrt(var) if var > 0 else 0.0
        if not sd > 1e-14 * max(1.0, abs(m)):
            out[:, c] = 0.5
            flags.append(True)
        else:
            out[:, c] = ndtr(dev / sd)
            flags.append(False)
    return ScorePairs(raw, out, tuple(flags))


def plugin_bandwidth(N: int, alpha_exponent: float = 0.15, scale: float = 0.25) -> float:
    """``scale * N ** -alpha_exponent`` on the transformed score scale."""
    if int(N) < 2:
        raise InputError(f"bandwidth needs N >= 2, got {N}")
    if not 0.0 < alpha_exponent < 0.25:
        raise InputError(f"bandwidth exponent must lie in (0, 0.25), got {alpha_exponent}")
    if not scale > 0:
        raise InputError("bandwidth scale must be positive")
    return float(scale) * float(N) ** (-float(alpha_exponent))


@njit(cache=True)
def _kernel_sums(s1, s2, t, w, h, poly):
    """Weighted kernel sums over all pairs, each unordered pair evaluated once."""
    N = s1.shape[0]
    num = np.zeros(N)
    den = np.zeros(N)
    m = poly.shape[0]
    norm = 1.0 / (2.0 * math.pi * h * h)
    k00 = poly[0] * poly[0] * norm
    for i in range(N):
        den[i] += k00 * w[i]
        num[i] += k00 * w[i] * t[i]
        for j in range(i + 1, N):
            u = (s1[j] - s1[i]) / h
            v = (s2[j] - s2[i]) / h
            u2 = u * u
            v2 = v * v
            pu = poly[m - 1]
            pv = poly[m - 1]
            for c in range(m - 2, -1, -1):
                pu = pu * u2 + poly[c]
                pv = pv * v2 + poly[c]
            k = pu * pv * math.exp(-0.5 * (u2 + v2)) * norm
            den[i] += k * w[j]
            num[i] += k * w[j] * t[j]
            den[j] += k * w[i]
            num[j] += k * w[i] * t[i]
    return num, den


def kernel_sums(scores, treatment, kernel: KernelSpec, weights=None):
    """Numerator and denominator of the smoother at every row (self term included)."""
    S = np.asarray(scores, dtype=float)
    t = np.asarray(treatment, dtype=float)
    w = np.ones(S.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    # reduce in a canonical row order so that permuting the input permutes the output bit-exactly
    order = np.lexsort((w, t, S[:, 1], S[:, 0]))
    num_s, den_s = _kernel_sums(
        np.ascontiguousarray(S[order, 0]),
        np.ascontiguousarray(S[order, 1]),
        np.ascontiguousarray(t[order]),
        np.ascontiguousarray(w[order]),
        float(kernel.bandwidth),
        kernel.poly,
    )
    num = np.empty_like(num_s)
    den = np.empty_like(den_s)
    num[order] = num_s
    den[order] = den_s
    return num, den


def smooth_ps(scores, treatment, kernel: KernelSpec, eps: float = 0.01, weights=None):
    """Kernel-smoothed treated fraction at each row, clamped to ``[eps, 1 - eps]``.

    Returns ``(pi_hat, diagnostics)``.
    """
    S = np.asarray(scores, dtype=float)
    t = np.asarray(treatment, dtype=float).reshape(-1)
    if S.ndim != 2 or S.shape[1] != 2 or S.shape[0] != t.shape[0]:
        raise InputError("scores must be N x 2 and match the treatment vector")
    if not 0.0 < eps < 0.5:
        raise InputError(f"truncation must lie in (0, 0.5), got {eps}")
    N = t.shape[0]
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    diag = {"degenerate_arm": False, "zero_denominator": 0, "truncated_low": 0, "truncated_high": 0}
    treated = float(np.dot(w, t))
    total = float(w.sum())
    if treated <= 0.0 or treated >= total:
        diag["degenerate_arm"] = True
        value = 1.0 - eps if treated >= total else eps
        return np.full(N, value), diag
    num, den = kernel_sums(S, t, kernel, w)
    bad = ~(den > 0.0)
    raw = np.empty(N)
    raw[~bad] = num[~bad] / den[~bad]
    raw[bad] = treated / total
    diag["zero_denominator"] = int(bad.sum())
    diag["truncated_low"] = int(np.count_nonzero(raw < eps))
    diag["truncated_high"] = int(np.count_nonzero(raw > 1.0 - eps))
    return np.clip(raw, eps, 1.0 - eps), diag


# ---------------------------------------------------------------------------
# working models and the composed fit


def ps_design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X])


def outcome_design(X, T) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X, np.asarray(T, dtype=float)])


def fit_ps_model(data, config, weights=None, *, pilot_lambda=None, lam=None) -> GlmFit:
    """Adaptive LASSO of treatment on baseline covariates over all rows."""
    return fit_adaptive_lasso(
        ps_design(data.x),
        data.t,
        "logistic",
        weights=weights,
        pilot_lambda=pilot_lambda,
        lam=lam,
        folds=config.cv_folds,
        seed=config.seed,
    )


def fit_outcome_model(data, config, weights=None, *, pilot_lambda=None, lam=None) -> GlmFit:
    """Adaptive LASSO of outcome on baseline covariates and treatment, labeled rows only."""
    L = data.labeled
    if not L.any():
        raise InputError("the labeled subset is empty: at least one row needs a nonempty y")
    w = None if weights is None else np.asarray(weights, dtype=float)[L]
    return fit_adaptive_lasso(
        outcome_design(data.x[L], data.t[L]),
        data.y[L],
        config.link_outcome,
        weights=w,
        pilot_lambda=pilot_lambda,
        lam=lam,
        folds=min(config.cv_folds, int(L.sum())),
        seed=config.seed,
    )


def fit_dips(data, config, weights=None, *, alpha: GlmFit | None = None, beta: GlmFit | None = None,
             alpha_direction=None) -> DipsFit:
    """Fit both working models (unless given) and smooth the treatment over their scores.

    ``alpha_direction`` overrides the propensity direction used for the scores
    while ``alpha`` is still reported.
    """
    if alpha is None:
        alpha = fit_ps_model(data, config, weights)
    if beta is None:
        beta = fit_outcome_model(data, config, weights)
    p = data.p_x
    a1 = alpha.coefficients[1 : 1 + p] if alpha_direction is None else np.asarray(alpha_direction, dtype=float)
    b1 = beta.coefficients[1 : 1 + p]
    scores = bivariate_scores(data.x, a1, b1, weights)
    kernel = KernelSpec(config.kernel_order, plugin_bandwidth(data.N, config.bandwidth_alpha, config.bandwidth_scale))
    pi_hat, diag = smooth_ps(scores.transformed, data.t, kernel, config.ps_truncation, weights)
    diag["degenerate_score"] = list(scores.degenerate)
    diag["bandwidth"] = kernel.bandwidth
    return DipsFit(alpha, beta, pi_hat, kernel, scores, diag)
