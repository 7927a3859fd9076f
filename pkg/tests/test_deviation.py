import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdpchain.chain import ContractionChain, LinearChain, simulate_path
from mdpchain.deviation import (
    ExperimentPlan,
    chernoff_envelope,
    decomposition,
    empirical_mdp,
    gaussian_negligibility,
    gaussian_regularize,
    martingale_difference_check,
    negligibility_probe,
    preflight,
    exponent_limit_check,
    stochastic_exponential,
    sum_statistic,
    unit_mean_identity,
)
from mdpchain.errors import ConfigurationError, ExponentOverflowError, PlanInfeasibleError
from mdpchain.noise import NoiseSpec
from mdpchain.observables import identity_observable, zero_observable
from mdpchain.poisson import build_corrector
from mdpchain.rate import rate_model
from mdpchain.rng import stream

_AR = LinearChain(A=[[0.5]], noise=NoiseSpec("gaussian"))
AR_EXACT = (_AR, identity_observable(1), build_corrector(_AR, identity_observable(1), "linear_exact"))


@pytest.mark.parametrize("alpha", [0.5, 1.0, 0.3])
def test_plan_rejects_alpha_outside_open_interval(alpha):
    with pytest.raises(ConfigurationError):
        ExperimentPlan(alpha=alpha)


def test_plan_rejects_small_R():
    with pytest.raises(ConfigurationError):
        ExperimentPlan(replicates=999)


def test_sum_statistic_trivial_cases(ar):
    assert np.all(sum_statistic(ar, zero_observable(), [1.0], 10, 0.6, 1) == 0)
    still = LinearChain(A=[[0.5]], noise=NoiseSpec.point_mass(1))
    assert sum_statistic(still, identity_observable(1), [0.0], 50, 0.6, 1)[0] == 0
    assert sum_statistic(ar, identity_observable(1), [2.5], 1, 0.6, 1)[0] == 2.5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 300), alpha=st.floats(0.51, 0.99))
def test_decomposition_identity_exact(seed, n, alpha):
    model, H, U = AR_EXACT
    path = simulate_path(model, [1.5], n, stream(seed))
    d = decomposition(model, H, U, path, alpha)
    assert np.all(np.abs(d.residual) <= 1e-10)


def test_decomposition_series_within_reported_bound():
    model = ContractionChain(theta=0.5, g="tanh", noise=NoiseSpec("gaussian"))
    H = identity_observable(1)
    U = build_corrector(model, H, "series_mc", tol=0.05, seed=2)
    path = simulate_path(model, [0.0], 40, stream(3))
    d = decomposition(model, H, U, path, 0.6, inner_m=64, rng=stream(4))
    assert np.all(np.abs(d.residual) <= d.residual_bound)


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("n", [10, 100, 1000])
def test_stochastic_exponential_exact_value(ar_exact, lam, n):
    model, _, U = ar_exact
    path = simulate_path(model, [0.0], n, stream(n))
    val = stochastic_exponential(model, U, path, [lam], 0.6)
    assert abs(val.normalized - 0.5 * lam * lam * 4) <= 1e-10
    assert val.normalized == stochastic_exponential(model, U, path, [-lam], 0.6).normalized


def test_stochastic_exponential_zero_lambda(ar_exact):
    model, _, U = ar_exact
    path = simulate_path(model, [0.0], 20, stream(0))
    assert stochastic_exponential(model, U, path, [0.0], 0.6).normalized == 0.0


def test_stochastic_exponential_overflow_guidance():
    model = ContractionChain(theta=0.5, g="identity", noise=NoiseSpec("gaussian"))
    H = identity_observable(1)
    U = build_corrector(model, H, "series_mc", tol=0.1, seed=1)
    path = simulate_path(model, [0.0], 2, stream(1))
    with pytest.raises(ExponentOverflowError):
        stochastic_exponential(model, U, path, [1e6], 0.6, inner_m=32, rng=stream(2))


def test_unit_mean_identity(ar_exact):
    model, _, U = ar_exact
    mean, se = unit_mean_identity(model, U, 32, [1.0], 10_000, stream(5))
    assert abs(mean - 1) <= 3 * se


def test_martingale_differences_have_zero_mean(ar_exact):
    model, _, U = ar_exact
    checks = martingale_difference_check(model, U, np.linspace(-5, 5, 10), 5000, stream(6))
    assert sum(c.passed for c in checks) >= 9


def test_exponent_limit_exact_gap_vanishes(ar_exact):
    model, _, U = ar_exact
    rows, verdicts = exponent_limit_check(model, U, [[4.0]], [[1.0], [2.0]], [16, 64, 256], 0.6, 1)
    assert all(verdicts.values())
    assert max(r.gap for r in rows) < 1e-10


def test_preflight_lists_feasible_cells():
    plan = ExperimentPlan(n_grid=(16, 4096), y_grid=((0.0,), (3.0,)), replicates=1000)
    with pytest.raises(PlanInfeasibleError) as info:
        preflight(plan, rate_model([[4.0]]))
    assert (16, (0.0,)) in info.value.feasible_cells


def test_empirical_mdp_zero_cell_and_conventions(ar):
    plan = ExperimentPlan(n_grid=(16, 64), y_grid=((0.0,), (6.0,)), epsilon=0.25, replicates=2000, block_size=700)
    est = empirical_mdp(plan, ar, identity_observable(1), rate_model([[4.0]]), check_feasible=False)
    far = est.cell(64, 6.0)
    assert far.zero_hit and math.isnan(far.rate_hat)
    assert far.rule3_bound == pytest.approx(math.log(3 / 2000))
    near = est.cell(64, 0.0)
    assert near.hits > 0 and 0 <= near.ci_lo <= near.p_hat <= near.ci_hi <= 1


def test_empirical_mdp_monotone_along_ray(ar):
    plan = ExperimentPlan(n_grid=(64,), y_grid=((0.0,), (0.5,), (1.0,), (1.5,)), epsilon=0.25, replicates=20_000)
    est = empirical_mdp(plan, ar, identity_observable(1), rate_model([[4.0]]), check_feasible=False)
    cells = [est.cell(64, y) for y in (0.0, 0.5, 1.0, 1.5)]
    for a, b in zip(cells, cells[1:]):
        assert b.p_hat <= a.p_hat or b.ci_lo <= a.ci_hi


def test_empirical_mdp_worker_independent(ar):
    plan = ExperimentPlan(n_grid=(8, 16), y_grid=((0.5,),), replicates=3000, block_size=1000)
    a = empirical_mdp(plan, ar, identity_observable(1), None, workers=1, check_feasible=False)
    b = empirical_mdp(plan, ar, identity_observable(1), None, workers=2, check_feasible=False)
    assert [c.hits for c in a.cells] == [c.hits for c in b.cells]


def test_gaussian_regularize():
    plan = ExperimentPlan(replicates=1000)
    assert gaussian_regularize(plan, 0.0) is plan
    assert gaussian_regularize(plan, 1.0).beta == 1.0


def test_regularized_degenerate_chain_matches_random_walk_rate():
    # H = 0: the statistic is sqrt(beta) n^{-a} sum theta_i, rate y^2 / (2 beta)
    model = LinearChain(A=[[0.5]], noise=NoiseSpec("gaussian"))
    plan = gaussian_regularize(ExperimentPlan(n_grid=(64, 256), y_grid=((0.5,),), epsilon=0.25, replicates=20_000), 1.0)
    est = empirical_mdp(plan, model, zero_observable(), rate_model([[0.0]]))
    cell = est.cell(256, 0.5)
    assert cell.rate_theory == pytest.approx(0.125)
    # the cell's log-probability is the Gaussian ball probability, computed directly
    from scipy.stats import norm

    sd = 256**0.5 / 256**0.6
    p = norm.cdf(0.75 / sd) - norm.cdf(0.25 / sd)
    assert cell.ci_lo <= p <= cell.ci_hi


def test_gaussian_negligibility_below_envelope():
    rows = gaussian_negligibility(1.0, 1.0, 0.6, [16, 64, 256], 50_000, 3)
    assert all(r["consistent"] for r in rows)


@pytest.mark.parametrize("quantity", ["state_norm", "corrector_abs"])
def test_probe_all_zero_hits_pass(quantity):
    model = LinearChain(A=[[0.5]], noise=NoiseSpec("uniform", scale=1.0))
    U = build_corrector(model, zero_observable(), "linear_exact") if quantity == "corrector_abs" else None
    res = negligibility_probe(model, quantity, 0.75, [2, 4, 8, 16], 50.0, 2000, 1, U=U)
    assert res.passed and all(r.hits == 0 for r in res.rows)


def test_probe_ar_envelope_dominates(ar):
    from mdpchain.examples import linear_chain_envelope

    env = linear_chain_envelope([[0.5]], ar.noise, 1.0, 0.75, 1.0)
    res = negligibility_probe(ar, "state_norm", 0.75, [2, 4, 8, 16, 32], 1.0, 50_000, 2, envelope=env)
    assert res.passed
    assert res.envelope_dominates


def test_chernoff_envelope_decreases():
    vals = [chernoff_envelope(n, 0.75, 1.0, 1.0, 1.0) for n in (4, 16, 64, 256)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
