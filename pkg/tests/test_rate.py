import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdpchain.chain import simulate_path
from mdpchain.errors import ConfigurationError, InsufficientDataError
from mdpchain.rate import (
    RateModel,
    correlation_series_B,
    estimate_B,
    local_covariance,
    penrose_ok,
    pseudoinverse,
    rate_limit_check,
    rate_model,
    rate_value,
    regularized_rate,
)
from mdpchain.rng import stream

BETAS = [1.0, 0.1, 0.01, 0.001, 1e-4]


def test_pseudoinverse_singular_diagonal():
    Bp, rank = pseudoinverse(np.diag([4.0, 0.0]))
    assert rank == 1
    assert np.allclose(Bp, np.diag([0.25, 0.0]))


def test_pseudoinverse_rank_one():
    v = np.array([1.0, 1.0]) / math.sqrt(2)
    Bp, rank = pseudoinverse(4 * np.outer(v, v))
    assert rank == 1
    assert np.allclose(Bp, np.outer(v, v) / 4)


@settings(max_examples=50, deadline=None)
@given(d=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_penrose_conditions_random_psd(d, seed):
    rng = np.random.default_rng(seed)
    r = rng.integers(0, d + 1)
    F = rng.standard_normal((d, r))
    B = F @ F.T
    Bp, rank = pseudoinverse(B)
    assert penrose_ok(B, Bp)
    assert rank == np.linalg.matrix_rank(B, tol=1e-8 * max(np.abs(np.linalg.eigvalsh(B)).max(initial=0), 1e-300)) or r == 0


def test_rate_values():
    assert rate_value(rate_model([[4.0]]), [2.0]) == pytest.approx(0.5)
    assert rate_value(rate_model(np.diag([4.0, 0.0])), [0.0, 1.0]) == math.inf
    assert rate_value(rate_model(np.diag([4.0, 0.0])), [2.0, 0.0]) == pytest.approx(0.5)


def test_regularized_rate():
    assert regularized_rate([[4.0]], 1.0, [2.0]) == pytest.approx(0.4)
    assert regularized_rate(np.diag([4.0, 0.0]), 0.01, [0.0, 1.0]) == pytest.approx(50.0)
    with pytest.raises(ConfigurationError):
        regularized_rate([[4.0]], 0.0, [1.0])


@pytest.mark.parametrize("y, verdict", [([1.0, 0.0], "RANGE"), ([0.0, 1.0], "DIVERGES"), ([1.0, 1.0], "DIVERGES")])
def test_limit_check_verdicts(y, verdict):
    assert rate_limit_check(np.diag([4.0, 0.0]), y, BETAS).verdict == verdict


def test_limit_check_grid_validation():
    with pytest.raises(ConfigurationError):
        rate_limit_check([[4.0]], [1.0], [0.1, 1.0, 0.01, 0.001])


def test_negative_eigenvalue_rejected():
    with pytest.raises(ConfigurationError):
        rate_model(np.diag([1.0, -0.5]))


def test_tiny_negative_eigenvalue_clipped():
    rm = rate_model(np.diag([1.0, -1e-12]))
    assert rm.eigvals.min() == 0 and rm.rank == 1


def test_asymmetric_rejected():
    with pytest.raises(ConfigurationError):
        pseudoinverse([[1.0, 0.5], [0.0, 1.0]])


def test_rate_model_round_trip():
    rm = rate_model(np.diag([2.0, 1.0]), provenance={"source": "test"})
    back = RateModel.from_dict(rm.to_dict())
    assert np.array_equal(back.B_pinv, rm.B_pinv) and back.provenance == rm.provenance


def test_correlation_series_matches_lyapunov_oracle():
    assert correlation_series_B([[0.5]], [[1.0]], [[1.0]])[0, 0] == pytest.approx(4.0, rel=1e-12)
    A = np.array([[0.5, 0.2], [0.0, 0.3]])
    G = np.linalg.inv(np.eye(2) - A)
    assert np.allclose(correlation_series_B(A, np.eye(2), np.eye(2)), G @ G.T, rtol=1e-10)


def test_local_covariance_exact_ar(ar_exact):
    model, _, U = ar_exact
    cov, se = local_covariance(model, U, [1.0], 50_000, stream(1))
    assert abs(cov[0, 0] - 4.0) < 4 * se[0, 0]


def test_estimate_B_ar(ar_exact):
    model, _, U = ar_exact
    path = simulate_path(model, [0.0], 2000, stream(2))
    rm = estimate_B(model, U, path, 64, stream(3))
    assert rm.B[0, 0] == pytest.approx(4.0, rel=0.05)


def test_estimate_B_needs_data(ar_exact):
    model, _, U = ar_exact
    with pytest.raises(InsufficientDataError):
        estimate_B(model, U, simulate_path(model, [0.0], 50, stream(2)), 64, stream(3))
