"""Perturbation resampling.

Each draw multiplies every row's contribution (losses, estimating equations,
smoother sums and the final weighted means) by an iid nonnegative weight with
unit mean and variance, then re-runs the estimator.  Penalty levels are those
chosen for the point estimate, so a draw with all weights equal to one
reproduces the point estimate exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, ModelConfig
from .errors import EstimationError, InputError, ResamplingError
from .estimators import EstimateReport, FitContext, estimate, estimate_all

DISTRIBUTIONS = ("scaled_beta", "multinomial_bootstrap", "unit")
MIN_VALID_DRAWS = 100
MAX_EXCLUDED = 0.05
MAD_SCALE = 1.4826


@dataclass(frozen=True)
class PerturbationScheme:
    """``unit`` gives all-ones weights and exists only for plumbing checks."""

    distribution: str = "scaled_beta"
    draws: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise InputError(f"unknown perturbation distribution {self.distribution!r}")
        if int(self.draws) < MIN_VALID_DRAWS:
            raise InputError(f"at least {MIN_VALID_DRAWS} draws are required, got {self.draws}")


def draw_weights(scheme: PerturbationScheme, N: int, draw_index: int) -> np.ndarray:
    """Weights for one draw; a pure function of ``(scheme.seed, draw_index)``."""
    N = int(N)
    if N < 1:
        raise InputError("N must be positive")
    if scheme.distribution == "unit":
        return np.ones(N)
    rng = np.random.default_rng(np.random.SeedSequence(int(scheme.seed), spawn_key=(int(draw_index),)))
    if scheme.distribution == "scaled_beta":
        return 4.0 * rng.beta(0.5, 1.5, size=N)
    return rng.multinomial(N, np.full(N, 1.0 / N)).astype(float)


def perturb_estimate(data: Dataset, config: ModelConfig, weights, tuning: dict, kind: str = "ss_dr") -> float:
    """Estimate under observation weights, reusing the point fit's tuning map."""
    return estimate(kind, FitContext(data, config, weights, tuning)).delta


@dataclass
class ResampleSummary:
    draws: np.ndarray
    se_sd: float
    se_mad: float
    ci: tuple
    pvalue: float
    level: float
    excluded: int = 0
    requested: int = 0

    def as_dict(self) -> dict:
        return {
            "se_sd": self.se_sd,
            "se_mad": self.se_mad,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "pvalue": self.pvalue,
            "draws_used": int(self.draws.shape[0]),
            "draws_excluded": self.excluded,
        }


def percentile_pvalue(draws) -> float:
    """Smallest two-sided level at which the percentile interval excludes zero."""
    d = np.asarray(draws, dtype=float)
    B = d.shape[0]
    tail = min(np.count_nonzero(d <= 0.0), np.count_nonzero(d >= 0.0))
    return float(min(1.0, max(2.0 / B, 2.0 * tail / B)))


def summarize(draws, point_estimate: float, level: float = 0.95, *, excluded: int = 0) -> ResampleSummary:
    """Standard errors, percentile interval and inverted-interval p-value of ``draws``.

    Non-finite entries are treated as excluded draws.
    """
    d = np.asarray(draws, dtype=float).reshape(-1)
    if not 0.0 < level < 1.0:
        raise InputError(f"level must lie in (0, 1), got {level}")
    finite = np.isfinite(d)
    excluded += int((~finite).sum())
    d = d[finite]
    if d.shape[0] < MIN_VALID_DRAWS:
        raise ResamplingError(f"only {d.shape[0]} valid draws; at least {MIN_VALID_DRAWS} are required")
    a = 1.0 - level
    lo, hi = np.quantile(d, [a / 2.0, 1.0 - a / 2.0])
    med = np.median(d)
    return ResampleSummary(
        draws=d,
        se_sd=0.0 if d.min() == d.max() else float(np.std(d, ddof=1)),
        se_mad=float(MAD_SCALE * np.median(np.abs(d - med))),
        ci=(float(lo), float(hi)),
        pvalue=percentile_pvalue(d),
        level=float(level),
        excluded=excluded,
        requested=d.shape[0] + excluded,
    )


# ---------------------------------------------------------------------------
# draw loops


def _draw_block(task):
    data, config, kinds, tuning, scheme, indices = task
    out = np.full((len(indices), len(kinds)), np.nan)
    for r, b in enumerate(indices):
        g = draw_weights(scheme, data.N, b)
        for c, res in enumerate(estimate_all(data, config, kinds, g, tuning).values()):
            if isinstance(res, EstimateReport) and math.isfinite(res.delta):
                out[r, c] = res.delta
    return out


def run_draws(
    data: Dataset,
    config: ModelConfig,
    kinds: Sequence[str],
    tuning: dict,
    scheme: PerturbationScheme,
    workers: int | None = None,
) -> np.ndarray:
    """``draws x len(kinds)`` matrix of replicate estimates; NaN marks a failed draw."""
    from .simulation import parallel_map, worker_count

    workers = worker_count() if workers is None else int(workers)
    idx = np.arange(int(scheme.draws))
    blocks = np.array_split(idx, max(1, min(workers * 4, idx.shape[0]))) if workers > 1 else [idx]
    tasks = [(data, config, tuple(kinds), tuning, scheme, b.tolist()) for b in blocks]
    return np.vstack(parallel_map(_draw_block, tasks, workers))


@dataclass
class ResampledEstimate:
    point: EstimateReport | Exception
    summary: ResampleSummary | Exception | None = None
    extras: dict = field(default_factory=dict)


def resample_all(
    data: Dataset,
    config: ModelConfig,
    kinds: Sequence[str],
    scheme: PerturbationScheme | None = None,
    workers: int | None = None,
) -> dict:
    """Point estimates plus resampling summaries for each estimator in ``kinds``.

    Failures are returned in place (as exceptions) so one estimator cannot
    sink the others.
    """
    if scheme is None:
        scheme = PerturbationScheme(config.perturb_dist, config.n_perturb, config.seed)
    ctx = FitContext(data, config)
    points = {}
    for kind in kinds:
        try:
            points[kind] = estimate(kind, ctx)
        except (EstimationError, InputError, np.linalg.LinAlgError, FloatingPointError) as exc:
            points[kind] = exc
    ok = [k for k in kinds if isinstance(points[k], EstimateReport)]
    out = {k: ResampledEstimate(points[k]) for k in kinds}
    if not ok:
        return out
    matrix = run_draws(data, config, ok, ctx.tuning, scheme, workers)
    B = matrix.shape[0]
    for c, kind in enumerate(ok):
        col = matrix[:, c]
        bad = int(np.count_nonzero(~np.isfinite(col)))
        if bad > MAX_EXCLUDED * B:
            out[kind].summary = ResamplingError(
                f"{kind}: {bad}/{B} perturbation draws were degenerate (more than {MAX_EXCLUDED:.0%})"
            )
            continue
        try:
            out[kind].summary = summarize(col, points[kind].delta, config.ci_level)
        except ResamplingError as exc:
            out[kind].summary = exc
    return out


def resample_estimator(data, config, kind, scheme=None, workers=None):
    """``(point report, summary)`` for a single estimator; failures raise."""
    res = resample_all(data, config, [kind], scheme, workers)[kind]
    if isinstance(res.point, Exception):
        raise res.point
    if isinstance(res.summary, Exception):
        raise res.summary
    return res.point, res.summary
