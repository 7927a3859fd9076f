import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mdpchain.chain import (
    ContractionChain,
    ExpressionChain,
    LinearChain,
    SignChain,
    coupled_contraction_check,
    cramer_check,
    sample_invariant,
    simulate_batch,
    simulate_path,
    step,
)
from mdpchain.errors import ConfigurationError, NumericalBlowupError
from mdpchain.noise import NoiseSpec
from mdpchain.rng import blocks, run_blocks, stream
from mdpchain.stats import RunningMoments, batch_means_se, rule_of_three, wilson_interval


@pytest.mark.parametrize(
    "x, xi, expected",
    [(5.0, 0.0, 3.8), (-5.0, 0.0, -3.8), (0.0, 0.3, 0.3)],
)
def test_sign_chain_hand_steps(x, xi, expected):
    model = SignChain(m=1.2, noise=NoiseSpec("gaussian"))
    assert step(model, [x], [xi])[0] == pytest.approx(expected, abs=1e-15)


def test_step_rejects_dimension_mismatch(ar):
    with pytest.raises(ConfigurationError):
        step(ar, [0.0, 1.0], [0.0])
    with pytest.raises(ConfigurationError):
        step(ar, [0.0], [0.0, 1.0])


def test_zero_noise_ar_decays_geometrically():
    model = LinearChain(A=[[0.5]], noise=NoiseSpec.point_mass(1))
    path = simulate_path(model, [8.0], 5, rng=0)
    assert np.allclose(path.states[:, 0], 8.0 * 0.5 ** np.arange(6))


def test_blowup_reports_step():
    model = ExpressionChain(expression="x * 1e200 + xi", noise=NoiseSpec.point_mass(1))
    with pytest.raises(NumericalBlowupError) as info:
        simulate_path(model, [1.0], 10, rng=0)
    assert info.value.step == 2


def test_expression_chain_pickles():
    model = ExpressionChain(expression="0.5 * tanh(x) + xi", noise=NoiseSpec("gaussian"), lipschitz_rho=0.5)
    clone = pickle.loads(pickle.dumps(model))
    x = np.array([[1.0], [-2.0]])
    xi = np.array([[0.1], [0.2]])
    assert np.array_equal(clone.drift(x, xi), model.drift(x, xi))


def test_explicit_shocks_replace_stream(ar):
    shocks = np.array([[1.0], [0.0], [-1.0]])
    path = simulate_path(ar, [0.0], 3, shocks=shocks)
    assert np.allclose(path.states[:, 0], [0.0, 1.0, 0.5, -0.75])


@settings(max_examples=25, deadline=None)
@given(theta=st.floats(-0.95, 0.95), x1=st.floats(-10, 10), x2=st.floats(-10, 10), seed=st.integers(0, 2**32 - 1))
def test_coupled_contraction_ratio_below_theta(theta, x1, x2, seed):
    model = ContractionChain(theta=theta, g="tanh", noise=NoiseSpec("gaussian"))
    rep = coupled_contraction_check(model, [x1], [x2], 50, stream(seed))
    assert rep.passed


def test_contraction_rejects_theta_one():
    with pytest.raises(ConfigurationError):
        ContractionChain(theta=1.0, g="tanh", noise=NoiseSpec("gaussian"))


def test_ar_invariant_moments(ar):
    # stationary law N(0, 1 / (1 - a^2))
    x = sample_invariant(ar, 40_000, stream(7, "inv"), stride=5)[:, 0]
    assert abs(x.mean()) < 5 * math.sqrt(4 / 3 / x.size)
    assert x.var(ddof=1) == pytest.approx(4 / 3, rel=0.05)
    assert stats.kstest(x, stats.norm(0, math.sqrt(4 / 3)).cdf).pvalue > 1e-4


def test_contraction_identity_matches_linear(gaussian):
    lin = LinearChain(A=[[0.5]], noise=gaussian)
    con = ContractionChain(theta=0.5, g="identity", noise=gaussian)
    a = sample_invariant(lin, 20_000, stream(1, "a"), stride=4)[:, 0]
    b = sample_invariant(con, 20_000, stream(2, "b"), stride=4)[:, 0]
    z_mean = (a.mean() - b.mean()) / math.sqrt(a.var() / a.size + b.var() / b.size)
    se_var = math.sqrt(2 * a.var() ** 2 / a.size + 2 * b.var() ** 2 / b.size)
    assert abs(z_mean) < 6
    assert abs(a.var() - b.var()) < 6 * se_var


def test_simulate_batch_callback_and_keep(ar):
    seen = []
    final, kept = simulate_batch(ar, np.zeros((4, 1)), 3, stream(1), keep=[0, 3], callback=lambda k, a, b, xi: seen.append(k))
    assert seen == [1, 2, 3]
    assert kept.shape == (2, 4, 1)
    assert np.array_equal(kept[1], final)


@pytest.mark.parametrize("family, scale", [("gaussian", 1.0), ("laplace", 0.5), ("uniform", 2.0)])
def test_cramer_check_matches_analytic(family, scale):
    noise = NoiseSpec(family, scale=scale)
    est = cramer_check(noise, 0.3, 200_000, stream(3, family))
    assert abs(est.estimate - noise.abs_mgf(0.3)) < 4 * est.se
    assert not est.overflow


def test_cramer_check_flags_laplace_outside_region():
    est = cramer_check(NoiseSpec("laplace", scale=1.0), 1.5, 10_000, stream(4))
    assert est.overflow


def test_cramer_delta_zero_is_one(gaussian):
    assert cramer_check(gaussian, 0.0, 10, 1).estimate == 1.0


def test_noise_moments():
    g = NoiseSpec("gaussian")
    assert g.abs_moment(3, 0.0) == pytest.approx(2 * math.sqrt(2 / math.pi), rel=1e-9)
    assert g.abs_mgf(1.0) == pytest.approx(2 * math.exp(0.5) * stats.norm.cdf(1.0), rel=1e-10)
    coin = NoiseSpec("discrete", values=(-1.0, 1.0), probs=(0.5, 0.5))
    assert coin.abs_moment(3, 0.2) == pytest.approx(math.exp(0.2))
    assert NoiseSpec("laplace", scale=1.0).abs_mgf(1.0) == math.inf


# -- rng and stats plumbing --------------------------------------------------------------


def test_streams_are_keyed_and_reproducible():
    a = stream(1, "x", 3).standard_normal(5)
    assert np.array_equal(a, stream(1, "x", 3).standard_normal(5))
    assert not np.array_equal(a, stream(1, "x", 4).standard_normal(5))
    assert not np.array_equal(a, stream(2, "x", 3).standard_normal(5))


def _draw_sum(seed, block_id, count):
    return stream(seed, "blk", block_id).standard_normal(count).sum()


def test_run_blocks_independent_of_workers():
    tasks = [(9, bid, cnt) for bid, _, cnt in blocks(10_500, 1000)]
    serial = run_blocks(_draw_sum, tasks, workers=1)
    parallel = run_blocks(_draw_sum, tasks, workers=3)
    assert serial == parallel
    assert len(tasks) == 11 and tasks[-1][2] == 500


@pytest.mark.parametrize("hits, total", [(0, 100), (100, 100), (37, 1000), (1, 10**6)])
def test_wilson_interval_contains_estimate(hits, total):
    lo, hi = wilson_interval(hits, total)
    assert 0 <= lo <= hits / total <= hi <= 1
    if hits == 0:
        assert lo == 0
    if hits == total:
        assert hi == 1


def test_rule_of_three():
    assert rule_of_three(10**6) == 3e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.integers(1, 49))
def test_running_moments_merge_matches_direct(values, cut):
    cut = min(cut, len(values) - 1)
    merged = RunningMoments.of(values[:cut]).merge(RunningMoments.of(values[cut:]))
    direct = RunningMoments.of(values)
    assert merged.count == direct.count
    assert merged.mean == pytest.approx(direct.mean, rel=1e-9, abs=1e-9)
    assert merged.m2 == pytest.approx(direct.m2, rel=1e-8, abs=1e-6)


def test_batch_means_se_grows_with_correlation():
    rng = np.random.default_rng(0)
    white = rng.standard_normal(30_000)
    ar = np.empty_like(white)
    ar[0] = 0
    for k in range(1, ar.size):
        ar[k] = 0.9 * ar[k - 1] + white[k]
    assert batch_means_se(ar)[1] > 3 * batch_means_se(white)[1]
