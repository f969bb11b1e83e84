import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from ssate.data import ModelConfig
from ssate.dips import fit_ps_model, ps_design
from ssate.errors import BenchmarkError, EstimationError, InputError
from ssate.glm import fit_ridge_glm
from ssate.simulation import (
    SimulationScenario,
    generate_dataset,
    generate_full,
    replication_seed,
    run_benchmark,
    run_coverage,
    true_delta,
)


def test_scenario_parameters():
    s = SimulationScenario()
    assert s.gamma.shape == (5, 13)
    assert np.all(s.gamma[:, 0] == 0) and np.all(s.gamma[:, 1:6] == 0.1) and np.all(s.gamma[:, 6:11] == -0.1)
    assert np.all(s.gamma[:, 11] == 0.1) and list(s.gamma[:, 12]) == [5, 5, 2.5, 0, 0]
    assert s.alpha1.sum() == pytest.approx(3.5) and s.beta1[6] == -1.15
    assert SimulationScenario("mis-pi").kind == "mis_pi"
    with pytest.raises(InputError):
        SimulationScenario("other")
    with pytest.raises(InputError):
        SimulationScenario(rho_x=-0.2)


def test_generation_is_deterministic():
    a = generate_dataset("mis_mu", 30, 300, 11)
    b = generate_dataset("mis_mu", 30, 300, 11)
    for f in ("y", "t", "x", "w"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    c = generate_dataset("mis_mu", 30, 300, 12)
    assert a.x.tobytes() != c.x.tobytes()


def test_size_preconditions():
    with pytest.raises(InputError):
        generate_dataset("both_correct", 1, 10, 0)
    with pytest.raises(InputError):
        generate_dataset("both_correct", 11, 10, 0)


def test_labels_are_mcar():
    for seed in (0, 1, 2):
        for kind in ("both_correct", "mis_pi"):
            d = generate_dataset(kind, 40, 200, seed)
            assert np.array_equal(np.flatnonzero(d.labeled), np.arange(40))


def test_treatment_rate_matches_integral():
    s = SimulationScenario()
    # alpha1' X is normal with variance alpha' Sigma alpha
    var = 0.35**2 * (10 * s.sigma2_x * (1 - s.rho_x) + 100 * s.sigma2_x * s.rho_x)
    p = integrate.quad(lambda z: expit(s.alpha0 + math.sqrt(var) * z) * norm.pdf(z), -12, 12, epsabs=1e-13)[0]
    full, _ = generate_full(s, 100_000, 3)
    se = math.sqrt(p * (1 - p) / 100_000)
    assert abs(full.t.mean() - p) <= 3 * se


def test_equicorrelation():
    full, _ = generate_full(SimulationScenario(), 100_000, 4)
    C = np.corrcoef(full.x, rowvar=False)
    off = C[~np.eye(10, dtype=bool)]
    # the pooled estimate of the common correlation, then each pair at 4 standard errors
    assert abs(off.mean() - 0.2) <= 0.01
    assert np.max(np.abs(off - 0.2)) <= 4 * (1 - 0.2**2) / math.sqrt(100_000)
    assert np.allclose(full.x.var(axis=0), 1.0, atol=0.02)


def _independent_surrogates(N, seed):
    """Surrogates from a separate construction: Cholesky sampling, direct loops over rows of Gamma."""
    rng = np.random.default_rng(seed)
    cov_x = 0.8 * np.eye(10) + 0.2
    X = rng.multivariate_normal(np.zeros(10), cov_x, size=N, method="cholesky")
    T = rng.random(N) < expit(-0.3 + 0.35 * X.sum(axis=1))
    lin = -0.65 + X @ np.array([1, 1, 1, 0.5, 0.5, 0.5, -1.15, -1, -1, -1]) + 1.0 * T
    Y = rng.random(N) < expit(lin)
    E = rng.multivariate_normal(np.zeros(5), 5 * (0.8 * np.eye(5) + 0.2), size=N, method="cholesky")
    loads = [5, 5, 2.5, 0, 0]
    W = np.empty((N, 5))
    for j in range(5):
        W[:, j] = np.floor(0.1 * X[:, :5].sum(axis=1) - 0.1 * X[:, 5:].sum(axis=1) + 0.1 * T + loads[j] * Y + E[:, j])
    return W


def test_surrogate_moments():
    full, _ = generate_full(SimulationScenario(), 100_000, 5)
    assert np.all(full.w == np.floor(full.w))
    ref = _independent_surrogates(400_000, 99)
    v, v_ref = full.w.var(axis=0), ref.var(axis=0)
    # sampling error of a variance at these sizes is below 1.5%
    assert np.allclose(v, v_ref, rtol=0.03)
    assert np.allclose(full.w.mean(axis=0), ref.mean(axis=0), atol=0.05)


@pytest.mark.slow
def test_true_delta_is_stable():
    a, sa = true_delta("both_correct")
    b, sb = true_delta("both_correct", seed=7)
    assert abs(a - b) <= 3 * math.hypot(sa, sb)
    assert 0.0 < sa < 1e-4


def test_true_delta_is_cached_and_seeded():
    assert true_delta("mis_pi", 200_000) == true_delta("mis_pi", 200_000)
    assert true_delta("mis_pi", 200_000) != true_delta("mis_pi", 200_000, seed=3)


def test_mis_pi_working_model_is_misspecified():
    s = SimulationScenario("mis_pi")
    full, _ = generate_full(s, 20_000, 6)
    fit = fit_ps_model(full, ModelConfig())
    eta = ps_design(full.x) @ fit.coefficients
    p = expit(eta)
    dev_working = -2 * np.sum(full.t * np.log(p) + (1 - full.t) * np.log1p(-p))
    a = full.x @ s.alpha1_1
    Z = np.column_stack([np.ones(full.N), a, a * (full.x @ s.alpha1_2)])
    oracle = fit_ridge_glm(Z, full.t, "logistic", 0.0)
    q = expit(Z @ oracle.coefficients)
    dev_oracle = -2 * np.sum(full.t * np.log(q) + (1 - full.t) * np.log1p(-q))
    assert dev_working > dev_oracle + 20


def test_replication_seeds_are_distinct():
    states = {tuple(replication_seed(5, r).generate_state(2)) for r in range(50)}
    assert len(states) == 50


def test_oracle_estimator_plumbing():
    truth, _ = true_delta("both_correct", 200_000)
    res = run_benchmark(
        ["both_correct"], [(30, 200)],
        {"oracle": lambda d, c: truth, "noisy": lambda d, c: truth + d.y[0] - 0.5},
        reps=6, seed=1, reference="oracle", truth_draws=200_000,
    )
    cell = res.cell("both_correct", 30, 200, "oracle")
    assert cell.bias == 0.0 and cell.rmse == 0.0 and cell.reps == 6
    noisy = res.cell("both_correct", 30, 200, "noisy")
    assert noisy.rmse >= abs(noisy.bias) and noisy.rmse == pytest.approx(0.5)


def test_benchmark_named_estimators_and_reference():
    res = run_benchmark(["mis_pi"], [(40, 300)], ["cc_dr", "cc_ipw"], reps=3, seed=2, truth_draws=100_000)
    assert res.cell("mis_pi", 40, 300, "cc_dr").re == 1.0
    for c in res.cells:
        assert c.rmse >= abs(c.bias) and c.failures == 0
        assert c.re == pytest.approx(res.cell("mis_pi", 40, 300, "cc_dr").mse / c.mse)
    again = run_benchmark(["mis_pi"], [(40, 300)], ["cc_dr", "cc_ipw"], reps=3, seed=2, truth_draws=100_000)
    assert [c.rmse for c in again.cells] == [c.rmse for c in res.cells]


def test_benchmark_preconditions_and_failures():
    with pytest.raises(InputError):
        run_benchmark(["both_correct"], [(30, 200)], ["cc_dr"], reps=1)

    def flaky(d, c):
        if d.t[0] == 1:
            raise EstimationError("forced")
        return 0.0

    with pytest.raises(BenchmarkError, match="forced"):
        run_benchmark(["both_correct"], [(30, 200)], {"flaky": flaky}, reps=20, seed=3, truth_draws=100_000)


def test_coverage_preconditions():
    with pytest.raises(InputError):
        run_coverage(sims=49)
    with pytest.raises(InputError):
        run_coverage(sims=50, draws=99)


@pytest.mark.slow
def test_unit_weights_give_zero_width_intervals():
    rep = run_coverage(60, 400, sims=50, draws=100, seed=1, distribution="unit", truth_draws=200_000, workers=1)
    assert rep.ase == 0.0 and rep.ase_mad == 0.0
    assert all(r["ci_lo"] == r["ci_hi"] == r["delta"] for r in rep.rows)
    assert rep.coverage == 0.0
