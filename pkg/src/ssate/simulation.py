"""Monte-Carlo data-generating processes and experiment drivers.

Three scenarios share one design: equicorrelated normal covariates, logistic
treatment and outcome models, and integer surrogates
``W = floor(Gamma (1, X, T, Y) + eps)``.  They differ in which working model
(propensity or baseline outcome) is misspecified by a product-of-indices
term.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .data import SIMULATION_ESTIMATORS, Dataset, ModelConfig
from .errors import BenchmarkError, EstimationError, InputError

SCENARIOS = ("both_correct", "mis_mu", "mis_pi")
# the (n, N) pairs of the published tables
DEFAULT_SIZES = ((100, 1112), (250, 5000), (500, 12500))
TRUTH_DRAWS = 10_000_000
MAX_FAILURE_RATE = 0.02


def normalize_scenario(name: str) -> str:
    key = str(name).strip().lower().replace("-", "_")
    if key not in SCENARIOS:
        raise InputError(f"unknown scenario {name!r}; choose from {list(SCENARIOS)}")
    return key


@dataclass(frozen=True)
class SimulationScenario:
    kind: str = "both_correct"
    p_x: int = 10
    p_w: int = 5
    sigma2_x: float = 1.0
    rho_x: float = 0.2
    sigma2_w: float = 5.0
    rho_w: float = 0.2
    alpha0: float = -0.3
    beta0: float = -0.65
    beta2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_scenario(self.kind))
        for p, rho in ((self.p_x, self.rho_x), (self.p_w, self.rho_w)):
            if not -1.0 / (p - 1) < rho < 1.0:
                raise InputError("equicorrelation outside the positive-definite range")

    @property
    def alpha1(self) -> np.ndarray:
        return np.full(10, 0.35)

    @property
    def beta1(self) -> np.ndarray:
        return np.array([1, 1, 1, 0.5, 0.5, 0.5, -1.15, -1, -1, -1], dtype=float)

    @property
    def alpha1_1(self) -> np.ndarray:
        return 0.5 * np.array([0, 0.35, 0, 0.35, 0, 0.35, 0, 0.35, 0, 0.35])

    @property
    def alpha1_2(self) -> np.ndarray:
        return np.array([0.35, 0, 0.35, 0, 0.35, 0, 0.35, 0, 0.35, 0])

    @property
    def beta1_1(self) -> np.ndarray:
        return 0.5 * np.array([1, 0, 1, 0, 0.5, 0, -0.5, 0, -1, 0])

    @property
    def beta1_2(self) -> np.ndarray:
        return np.array([0, 0.5, 0, 0.5, 0, 0.5, 0, 0.5, 0, 0.5])

    @property
    def gamma(self) -> np.ndarray:
        """5 x 13 surrogate loading on (1, X, T, Y)."""
        return np.column_stack(
            [np.zeros(5), np.full((5, 5), 0.1), np.full((5, 5), -0.1), np.full(5, 0.1), [5, 5, 2.5, 0, 0]]
        )

    def ps_index(self, X) -> np.ndarray:
        if self.kind == "mis_pi":
            return self.alpha0 + (X @ self.alpha1_1) * (X @ self.alpha1_2 + 1.0)
        return self.alpha0 + X @ self.alpha1

    def propensity(self, X) -> np.ndarray:
        return expit(self.ps_index(X))

    def outcome_mean(self, X, k) -> np.ndarray:
        if self.kind == "mis_mu":
            idx = self.beta0 + (X @ self.beta1_1) * (X @ self.beta1_2 + 1.0)
        else:
            idx = self.beta0 + X @ self.beta1
        return expit(idx + self.beta2 * np.asarray(k, dtype=float))


def equicorrelated_normal(rng: np.random.Generator, size: int, p: int, sigma2: float, rho: float) -> np.ndarray:
    """Rows ~ N(0, sigma2 ((1 - rho) I + rho 11')) via a shared factor (rho >= 0)."""
    if rho >= 0:
        z = rng.standard_normal((size, p))
        common = rng.standard_normal((size, 1))
        return math.sqrt(sigma2 * (1.0 - rho)) * z + math.sqrt(sigma2 * rho) * common
    cov = sigma2 * ((1.0 - rho) * np.eye(p) + rho * np.ones((p, p)))
    return rng.standard_normal((size, p)) @ np.linalg.cholesky(cov).T


def generate_full(scenario: SimulationScenario, N: int, seed) -> tuple[Dataset, np.ndarray]:
    """All ``N`` rows with outcomes observed, plus the true propensities."""
    rng = np.random.default_rng(seed)
    X = equicorrelated_normal(rng, N, scenario.p_x, scenario.sigma2_x, scenario.rho_x)
    ps = scenario.propensity(X)
    T = (rng.random(N) < ps).astype(float)
    Y = (rng.random(N) < scenario.outcome_mean(X, T)).astype(float)
    eps = equicorrelated_normal(rng, N, scenario.p_w, scenario.sigma2_w, scenario.rho_w)
    design = np.column_stack([np.ones(N), X, T, Y])
    W = np.floor(design @ scenario.gamma.T + eps)
    return Dataset(Y, T, X, W), ps


def generate_dataset(scenario, n: int, N: int, seed) -> Dataset:
    """Pooled sample whose first ``n`` rows are labeled."""
    if isinstance(scenario, str):
        scenario = SimulationScenario(scenario)
    n, N = int(n), int(N)
    if not 2 <= n <= N:
        raise InputError(f"sizes must satisfy 2 <= n <= N (n={n}, N={N})")
    full, _ = generate_full(scenario, N, seed)
    y = full.y.copy()
    y[n:] = np.nan
    return Dataset(y, full.t, full.x, full.w)


@lru_cache(maxsize=None)
def true_delta(scenario, draws: int = TRUTH_DRAWS, seed: int = 20_190_701) -> tuple[float, float]:
    """Monte-Carlo value of E{mu_1(X) - mu_0(X)} and its standard error."""
    if isinstance(scenario, str):
        scenario = SimulationScenario(scenario)
    rng = np.random.default_rng([seed, SCENARIOS.index(scenario.kind)])
    chunk = 1_000_000
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        X = equicorrelated_normal(rng, m, scenario.p_x, scenario.sigma2_x, scenario.rho_x)
        d = scenario.outcome_mean(X, 1) - scenario.outcome_mean(X, 0)
        total += math.fsum(d)
        total_sq += math.fsum(d * d)
        done += m
    mean = total / draws
    var = max(total_sq / draws - mean * mean, 0.0) * draws / (draws - 1)
    return mean, math.sqrt(var / draws)


# ---------------------------------------------------------------------------
# experiment drivers


def worker_count() -> int:
    raw = os.environ.get("SSATE_THREADS", "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise InputError(f"SSATE_THREADS must be a positive integer, got {raw!r}") from None
        if value < 1:
            raise InputError(f"SSATE_THREADS must be a positive integer, got {raw!r}")
        return value
    return os.cpu_count() or 1


def replication_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(int(index),))


def parallel_map(fn, items: Sequence, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, fanned out over processes when ``workers > 1``."""
    workers = worker_count() if workers is None else int(workers)
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


@dataclass
class BenchmarkCell:
    scenario: str
    n: int
    N: int
    estimator: str
    bias: float
    rmse: float
    mse: float
    re: float
    reps: int
    failures: int
    delta_true: float
    delta_true_se: float
    seed: int


@dataclass
class BenchmarkResult:
    cells: list
    estimates: dict = field(default_factory=dict)  # (scenario, n, N) -> {estimator: array over reps}
    errors: dict = field(default_factory=dict)

    def cell(self, scenario, n, N, estimator) -> BenchmarkCell:
        for c in self.cells:
            if (c.scenario, c.n, c.N, c.estimator) == (normalize_scenario(scenario), n, N, estimator):
                return c
        raise KeyError((scenario, n, N, estimator))


def _run_named(task):
    scenario, n, N, seed, rep, kinds, config = task
    from .estimators import estimate_all

    data = generate_dataset(scenario, n, N, replication_seed(seed, rep))
    out = {}
    for kind, res in estimate_all(data, config, kinds).items():
        out[kind] = res.delta if not isinstance(res, Exception) else f"{type(res).__name__}: {res}"
    return out


def _run_callables(task):
    scenario, n, N, seed, rep, fns, config = task
    data = generate_dataset(scenario, n, N, replication_seed(seed, rep))
    out = {}
    for name, fn in fns.items():
        try:
            out[name] = float(fn(data, config))
        except (EstimationError, InputError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[name] = f"{type(exc).__name__}: {exc}"
    return out


def run_benchmark(
    scenarios: Iterable[str] = SCENARIOS,
    sizes: Iterable[tuple] = ((100, 1112),),
    estimators: Sequence[str] | Mapping[str, Callable] = SIMULATION_ESTIMATORS,
    reps: int = 1000,
    seed: int = 1,
    *,
    config: ModelConfig | None = None,
    workers: int | None = None,
    reference: str = "cc_dr",
    truth_draws: int = TRUTH_DRAWS,
) -> BenchmarkResult:
    """Bias, RMSE and relative efficiency of each estimator in each cell.

    ``estimators`` is either a list of built-in names or a mapping of names to
    callables ``fn(dataset, config) -> float``.
    """
    reps = int(reps)
    if reps < 2:
        raise InputError(f"reps must be at least 2, got {reps}")
    config = config or ModelConfig()
    named = not isinstance(estimators, Mapping)
    names = list(estimators) if named else list(estimators.keys())
    cells, estimates, errors = [], {}, {}
    for scenario in scenarios:
        scenario = normalize_scenario(scenario)
        delta, delta_se = true_delta(scenario, truth_draws)
        for n, N in sizes:
            if named:
                tasks = [(scenario, n, N, seed, r, tuple(names), config) for r in range(reps)]
                rows = parallel_map(_run_named, tasks, workers)
            else:
                tasks = [(scenario, n, N, seed, r, dict(estimators), config) for r in range(reps)]
                rows = parallel_map(_run_callables, tasks, 1 if workers is None else workers)
            key = (scenario, n, N)
            estimates[key] = {}
            errors[key] = {}
            mse = {}
            for name in names:
                vals = np.array([r[name] if not isinstance(r[name], str) else np.nan for r in rows])
                errs = [(i, r[name]) for i, r in enumerate(rows) if isinstance(r[name], str)]
                estimates[key][name] = vals
                errors[key][name] = errs
                ok = vals[~np.isnan(vals)]
                err = ok - delta
                mse[name] = float(np.mean(err**2)) if ok.size else math.nan
            for name in names:
                ok = estimates[key][name][~np.isnan(estimates[key][name])]
                err = ok - delta
                ref = mse.get(reference, math.nan)
                cells.append(
                    BenchmarkCell(
                        scenario, n, N, name,
                        float(np.mean(err)) if ok.size else math.nan,
                        math.sqrt(mse[name]) if ok.size else math.nan,
                        mse[name],
                        ref / mse[name] if ok.size and mse[name] > 0 else math.nan,
                        int(ok.size),
                        len(errors[key][name]),
                        delta,
                        delta_se,
                        int(seed),
                    )
                )
    result = BenchmarkResult(cells, estimates, errors)
    worst = max((c.failures / reps for c in cells), default=0.0)
    if worst > MAX_FAILURE_RATE:
        bad = [c for c in cells if c.failures / reps > MAX_FAILURE_RATE]
        c = bad[0]
        sample = errors[(c.scenario, c.n, c.N)][c.estimator][0][1]
        raise BenchmarkError(
            f"{c.estimator} failed in {c.failures}/{reps} replications "
            f"({c.scenario}, n={c.n}, N={c.N}); first error: {sample}"
        )
    return result


# ---------------------------------------------------------------------------
# coverage


@dataclass
class CoverageReport:
    n: int
    N: int
    sims: int
    draws: int
    seed: int
    delta_true: float
    delta_true_se: float
    bias: float
    emp_se: float
    ase: float
    ase_mad: float
    rmse: float
    coverage: float
    failures: int
    rows: list = field(default_factory=list)


def _coverage_sim(task):
    scenario, n, N, seed, sim, draws, config, distribution = task
    from .resampling import PerturbationScheme, resample_estimator

    data = generate_dataset(scenario, n, N, replication_seed(seed, sim))
    scheme = PerturbationScheme(distribution, draws, int(replication_seed(seed, sim).generate_state(1)[0]))
    try:
        point, summary = resample_estimator(data, config, "ss_dr", scheme, workers=1)
    except (EstimationError, InputError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return {
        "sim": sim,
        "delta": point.delta,
        "se_sd": summary.se_sd,
        "se_mad": summary.se_mad,
        "ci_lo": summary.ci[0],
        "ci_hi": summary.ci[1],
        "excluded": summary.excluded,
    }


def run_coverage(
    n: int = 100,
    N: int = 1112,
    sims: int = 1000,
    draws: int = 1000,
    seed: int = 1,
    *,
    scenario: str = "both_correct",
    config: ModelConfig | None = None,
    workers: int | None = None,
    distribution: str = "scaled_beta",
    truth_draws: int = TRUTH_DRAWS,
) -> CoverageReport:
    """SS_DR with resampling inference over repeated simulated datasets."""
    if int(sims) < 50:
        raise InputError(f"sims must be at least 50, got {sims}")
    if int(draws) < 100:
        raise InputError(f"draws must be at least 100, got {draws}")
    config = config or ModelConfig()
    scenario = normalize_scenario(scenario)
    delta, delta_se = true_delta(scenario, truth_draws)
    tasks = [(scenario, n, N, seed, s, int(draws), config, distribution) for s in range(int(sims))]
    rows = parallel_map(_coverage_sim, tasks, workers)
    good = [r for r in rows if not isinstance(r, str)]
    failures = len(rows) - len(good)
    if failures / len(rows) > MAX_FAILURE_RATE:
        first = next(r for r in rows if isinstance(r, str))
        raise BenchmarkError(f"{failures}/{len(rows)} coverage simulations failed; first error: {first}")
    est = np.array([r["delta"] for r in good])
    covered = np.array([r["ci_lo"] <= delta <= r["ci_hi"] for r in good])
    return CoverageReport(
        n, N, int(sims), int(draws), int(seed), delta, delta_se,
        bias=float(np.mean(est - delta)),
        emp_se=float(np.std(est, ddof=1)),
        ase=float(np.mean([r["se_sd"] for r in good])),
        ase_mad=float(np.mean([r["se_mad"] for r in good])),
        rmse=float(np.sqrt(np.mean((est - delta) ** 2))),
        coverage=float(np.mean(covered)),
        failures=failures,
        rows=good,
    )
