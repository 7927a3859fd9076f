import numpy as np
import pytest

from mdpchain.chain import LinearChain
from mdpchain.noise import NoiseSpec
from mdpchain.observables import identity_observable
from mdpchain.poisson import build_corrector

VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def gaussian():
    return NoiseSpec("gaussian")


@pytest.fixture
def ar(gaussian):
    """AR(1) with a = 0.5 and unit Gaussian noise; B = 4 for H(x) = x."""
    return LinearChain(A=[[0.5]], noise=gaussian)


@pytest.fixture
def ar_exact(ar):
    H = identity_observable(1)
    return ar, H, build_corrector(ar, H, "linear_exact")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_AR = """\
model: {kind: linear, A: [[0.5]], noise: {family: gaussian}}
observable: {kind: identity}
plan:
  alpha: 0.6
  n_grid: [16, 64]
  y_grid: [[0.5], [1.0]]
  epsilon: 0.25
  replicates: 4000
  lambda_grid: [[1.0]]
  master_seed: 7
  block_size: 1000
corrector: {mode: linear_exact, probe_states: [[0.0], [2.0]], residual_m: 2000}
rate: {path_length: 2000, inner_m: 16}
stochastic: {n_grid: [16, 64], unit_mean_n: 16, unit_mean_R: 2000, decomposition_paths: 20, decomposition_n: 64}
negligibility: {quantity: state_norm, alpha: 0.75, n_grid: [2, 4, 8], eps: 1.0, replicates: 4000, delta: 1.0}
martingale: {source: iid, epsilon: 0.5, n_grid: [16, 32], replicates: 4000}
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL_AR)
    return path
