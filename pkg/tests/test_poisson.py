import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdpchain.chain import ContractionChain, LinearChain, sample_invariant
from mdpchain.errors import ConfigurationError, InstabilityError, UnsupportedModelError
from mdpchain.noise import NoiseSpec
from mdpchain.observables import (
    LinearObservable,
    MapObservable,
    center_observable,
    identity_observable,
    lipschitz_spot_check,
    zero_observable,
)
from mdpchain.poisson import (
    build_corrector,
    exact_corrector_linear,
    poisson_residual,
    solve_corrector,
    transition_mean,
    truncation_depth,
)
from mdpchain.rng import stream


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-0.9, 0.9), x=st.floats(-5, 5))
def test_exact_corrector_is_x_over_one_minus_a(a, x):
    U = exact_corrector_linear([[a]], [[1.0]])
    assert U(np.array([x]))[0] == pytest.approx(x / (1 - a), rel=1e-12, abs=1e-12)


def test_exact_corrector_rejects_unstable():
    with pytest.raises(InstabilityError):
        exact_corrector_linear([[1.0]], [[1.0]])


@pytest.mark.parametrize("x", [-5.0, -1.3, 0.0, 2.2, 5.0])
def test_series_corrector_matches_oracle(ar, x):
    val = solve_corrector(ar, identity_observable(1), [x], 1e-2, stream(5, "solve", int(x * 10) + 100))
    assert abs(val.value[0] - 2 * x) <= 1e-2
    assert val.tail_bound <= 5e-3


def test_zero_observable_gives_zero_corrector(ar):
    val = solve_corrector(ar, zero_observable(), [3.0], 1e-2, 1)
    assert np.all(val.value == 0)


def test_iid_chain_corrector_is_centred_observable():
    # theta = 0: X_n are i.i.d. N(0, 1) and U = H - mean(H) = H for H(x) = tanh(x)
    model = ContractionChain(theta=0.0, g="tanh", noise=NoiseSpec("gaussian"))
    H = MapObservable(1, 1, 1.0, "tanh")
    val = solve_corrector(model, H, [0.7], 1e-2, 2)
    assert val.value[0] == pytest.approx(math.tanh(0.7), abs=1e-2)


def test_truncation_depth_geometry():
    N = truncation_depth(1.0, 0.5, 2.0, 1e-2)
    assert 1.0 * 2.0 * 0.5 ** (N + 1) / 0.5 < 5e-3
    assert 1.0 * 2.0 * 0.5**N / 0.5 >= 5e-3


def test_transition_mean_ar(ar):
    mean, se = transition_mean(ar, identity_observable(1), [4.0], 3, 20_000, stream(1))
    assert abs(mean[0] - 0.5) < 4 * se[0]


def test_series_field_is_order_independent():
    model = ContractionChain(theta=0.6, g="tanh", noise=NoiseSpec("gaussian"))
    H = MapObservable(1, 1, 1.0, "tanh")
    U1 = build_corrector(model, H, "series_mc", tol=0.05, seed=3)
    U2 = build_corrector(model, H, "series_mc", tol=0.05, seed=3)
    pts = np.array([[0.5], [-1.0], [2.0]])
    a = U1.evaluate(pts)
    b = U2.evaluate(pts[::-1])[::-1]
    assert np.array_equal(a, b)
    clone = pickle.loads(pickle.dumps(U1))
    assert np.array_equal(clone.evaluate(pts), a)


def test_series_needs_rho():
    model = LinearChain(A=[[0.5, 1.0], [0.0, 0.5]], noise=NoiseSpec("gaussian", dim=2))
    H = MapObservable(2, 2, 1.0, "tanh")
    with pytest.raises(UnsupportedModelError):
        build_corrector(model, H, "series_mc")


def test_residual_passes_for_exact_and_series(ar_exact):
    model, H, U = ar_exact
    for x in (-3.0, 0.0, 4.0):
        assert poisson_residual(model, H, U, [x], 5000, stream(9, int(x) + 10)).passed
    S = build_corrector(model, H, "series_mc", tol=0.05, seed=1)
    assert poisson_residual(model, H, S, [1.0], 200, stream(10)).passed


def test_residual_detects_wrong_corrector(ar_exact):
    model, H, U = ar_exact
    wrong = exact_corrector_linear([[0.3]], [[1.0]], model.noise)
    assert not poisson_residual(model, H, wrong, [4.0], 10_000, stream(11)).passed


def test_shift_keeps_poisson_equation(ar_exact):
    model, H, U = ar_exact
    shifted = U.shifted([3.0])
    assert shifted([1.0])[0] == pytest.approx(5.0)
    assert poisson_residual(model, H, shifted, [1.0], 5000, stream(12)).passed


def test_exact_zeta_covariance(ar_exact):
    _, _, U = ar_exact
    assert U.zeta_cov[0, 0] == pytest.approx(4.0)


# -- observables --------------------------------------------------------------------------


def test_linear_observable_lipschitz_is_l1_operator_norm():
    H = LinearObservable.of([[1.0, -2.0], [0.5, 0.5]])
    assert H.lipschitz_K == 2.5
    assert lipschitz_spot_check(H, np.random.default_rng(0)) <= 2.5 + 1e-12


def test_centering_constant_observable_is_exact():
    H = MapObservable(1, 1, 0.0, "constant:3")
    C = center_observable(H, np.zeros((10, 1)))
    assert np.all(C(np.array([[1.0], [2.0]])) == 0)
    assert C.is_zero


def test_centering_square_under_ar_invariant(ar):
    samples = sample_invariant(ar, 20_000, stream(2), stride=4)
    C = center_observable(MapObservable(1, 1, None, "square"), samples)
    assert C.constant[0] == pytest.approx(4 / 3, rel=0.05)


def test_observable_rejects_bad_shape():
    with pytest.raises(ConfigurationError):
        LinearObservable(2, 1, None, np.eye(2))
