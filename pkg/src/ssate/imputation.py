"""Robust imputation.

The imputation design is ``[1 | spline(V) | T | spline(U)]`` where ``U`` is
the signed inverse propensity covariate.  Because ``U`` lies in the span of
its own spline block, the fitted score equation forces the inverse-weighted
residuals to balance, which is what keeps IPW of the imputations unbiased
when the spline model itself is wrong.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .glm import GlmFit, LinkSpec, cross_validate_ridge, fit_ridge_glm, get_link


def utility_covariate(treatment, ps):
    """``1/ps`` for treated rows, ``-1/(1-ps)`` for controls."""
    t = np.asarray(treatment, dtype=float)
    p = np.asarray(ps, dtype=float)
    if np.any(~(p > 0.0)) or np.any(~(p < 1.0)):
        raise InputError("propensity scores must lie strictly inside (0, 1)")
    out = np.where(t == 1.0, 1.0 / p, -1.0 / (1.0 - p))
    return out if out.ndim else float(out)


def natural_spline_columns(x, knots) -> np.ndarray:
    """Truncated-power natural cubic spline basis without the constant.

    With knots ``k_1 < ... < k_K`` the columns are ``x`` and
    ``d_j(x) - d_{K-1}(x)`` for ``j = 1..K-2``, where
    ``d_j(x) = ((x - k_j)_+^3 - (x - k_K)_+^3) / (k_K - k_j)``.
    The basis is linear beyond both outer knots.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    knots = np.asarray(knots, dtype=float)
    K = knots.shape[0]
    if K < 3:
        return x[:, None].copy()
    last = knots[-1]
    tail = np.maximum(x - last, 0.0) ** 3

    def d(j):
        return (np.maximum(x - knots[j], 0.0) ** 3 - tail) / (last - knots[j])

    dK = d(K - 2)
    cols = [x] + [d(j) - dK for j in range(K - 2)]
    return np.column_stack(cols)


@dataclass
class CoordinateBasis:
    """Knots and column standardization for one input coordinate."""

    knots: np.ndarray
    keep: np.ndarray  # boolean mask over raw columns
    mean: np.ndarray
    sd: np.ndarray
    data_range: tuple = (0.0, 0.0)

    @property
    def kind(self) -> str:
        if not self.keep.any():
            return "dropped"
        return "spline" if self.knots.shape[0] >= 3 else "linear"

    @property
    def width(self) -> int:
        return int(self.keep.sum())

    def evaluate(self, x) -> np.ndarray:
        raw = natural_spline_columns(x, self.knots)[:, self.keep]
        return (raw - self.mean) / self.sd


def build_coordinate_basis(values, n_knots: int = 6) -> CoordinateBasis:
    """Knots at the ``1/(K+1), ..., K/(K+1)`` quantiles of ``values``, deduplicated.

    Fewer than three distinct knots fall back to a single linear column; a
    column with no spread over ``values`` is dropped.
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    if n_knots > 0:
        probs = np.arange(1, n_knots + 1) / (n_knots + 1.0)
        knots = np.unique(np.quantile(x, probs))
    else:
        knots = np.empty(0)
    if knots.shape[0] < 3:
        knots = np.empty(0)
    raw = natural_spline_columns(x, knots)
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(mean))
    return CoordinateBasis(knots, keep, mean[keep], sd[keep], (float(x.min()), float(x.max())))


@dataclass
class ImputationBasis:
    v_bases: list
    u_basis: CoordinateBasis
    interactions: bool = False

    @property
    def v_width(self) -> int:
        return sum(b.width for b in self.v_bases)

    @property
    def u_columns(self) -> tuple:
        """Design indices of the utility-covariate block."""
        start = 1 + self.v_width + 1
        return tuple(range(start, start + self.u_basis.width))

    @property
    def design_width(self) -> int:
        width = 1 + self.v_width + 1 + self.u_basis.width
        if self.interactions:
            width += self.v_width
        return width

    def metadata(self) -> dict:
        return {
            "v_kinds": [b.kind for b in self.v_bases],
            "v_widths": [b.width for b in self.v_bases],
            "u_kind": self.u_basis.kind,
            "u_width": self.u_basis.width,
            "design_width": self.design_width,
        }


def build_imputation_basis(V, U, n_knots: int = 6, interactions: bool = False) -> ImputationBasis:
    """Knots from the pooled (labeled and unlabeled) values of each coordinate."""
    V = np.asarray(V, dtype=float)
    return ImputationBasis(
        [build_coordinate_basis(V[:, j], n_knots) for j in range(V.shape[1])],
        build_coordinate_basis(U, n_knots),
        interactions,
    )


def build_imputation_design(V, T, U, basis: ImputationBasis) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    T = np.asarray(T, dtype=float).reshape(-1)
    U = np.asarray(U, dtype=float).reshape(-1)
    if V.shape[1] != len(basis.v_bases):
        raise InputError(f"V has {V.shape[1]} columns but the basis covers {len(basis.v_bases)}")
    if not (V.shape[0] == T.shape[0] == U.shape[0]):
        raise InputError("V, T and U must have the same number of rows")
    blocks = [np.ones((V.shape[0], 1))]
    vcols = [b.evaluate(V[:, j]) for j, b in enumerate(basis.v_bases) if b.width]
    blocks.extend(vcols)
    blocks.append(T[:, None])
    if basis.u_basis.width:
        blocks.append(basis.u_basis.evaluate(U))
    if basis.interactions:
        blocks.extend(c * T[:, None] for c in vcols)
    return np.hstack(blocks)


@dataclass
class ImputationFit:
    gamma: GlmFit
    basis: ImputationBasis | None
    link: LinkSpec
    design_width: int
    diagnostics: dict = field(default_factory=dict)


def fit_imputation(
    design,
    y,
    link: LinkSpec | str,
    lam: float | None = None,
    *,
    basis: ImputationBasis | None = None,
    weights=None,
    folds: int = 5,
    seed: int = 0,
    unpenalized=(0,),
) -> ImputationFit:
    """Ridge fit on the labeled design; ``lam`` defaults to the cross-validated choice.

    Every coefficient except the intercept is penalized.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if design.shape[0] < 2:
        raise InputError("imputation needs at least 2 labeled rows")
    link = get_link(link)
    if lam is None:
        lam = cross_validate_ridge(
            design, y, link, None, min(folds, design.shape[0]), unpenalized=unpenalized, weights=weights, seed=seed
        )
    gamma = fit_ridge_glm(design, y, link, lam, unpenalized, weights=weights)
    return ImputationFit(gamma, basis, link, design.shape[1], {"lambda": float(lam), "converged": gamma.converged})


def impute_design(fit: ImputationFit, design) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    if design.ndim != 2 or design.shape[1] != fit.design_width:
        raise InputError(f"design width {design.shape[-1]} does not match the fitted width {fit.design_width}")
    return fit.link.inverse(design @ fit.gamma.coefficients)


def impute(fit: ImputationFit, V, T, U) -> np.ndarray:
    """``g(gamma' z)`` for every row of ``(V, T, U)``."""
    if fit.basis is None:
        raise InputError("fit carries no basis; use impute_design")
    return impute_design(fit, build_imputation_design(V, T, U, fit.basis))
