"""The four registered settings: linear AR chains, nonlinear contractions, the sign chain and
the autoregression estimator, with the checks attached to each."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .chain import SLOPE_ONE_MAPS, ContractionChain, LinearChain, PathSample, SignChain
from .deviation import chernoff_envelope
from .errors import ConfigurationError, DegenerateDesignError, DeltaTooLargeError, InstabilityError, ValidityError
from .noise import NoiseSpec
from .rng import as_generator, blocks, run_blocks, stream
from .stats import RunningMoments, wilson_interval

GAUSSIAN = NoiseSpec("gaussian")


# -- linear chains ----------------------------------------------------------------------


@dataclass(frozen=True)
class DecayCertificate:
    """max |entries of A^n| <= K rho^n for n >= 1, checked up to ``verified_to``."""

    K: float
    rho: float
    n_fit: int
    verified_to: int
    spectral_radius: float


def _power_ratios(A, rho, n):
    """max |entries of (A / rho)^k| for k = 1..n."""
    step = A / rho
    P = np.eye(A.shape[0])
    out = np.empty(n)
    for k in range(n):
        P = P @ step
        out[k] = np.abs(P).max()
    return out


def decay_certificate(A, n_fit: int = 200) -> DecayCertificate:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    radius = float(np.max(np.abs(np.linalg.eigvals(A))))
    if radius >= 1:
        raise InstabilityError(f"spectral radius {radius:.6g} >= 1: all eigenvalues of A must lie inside the unit circle")
    if not np.any(A):
        return DecayCertificate(0.0, 0.0, n_fit, 10 * n_fit, radius)
    rho = None
    if radius > 0:
        # the spectral radius itself works when the scaled powers stay bounded (no growing Jordan factor)
        r = _power_ratios(A, radius, n_fit)
        half = n_fit // 2
        if r[half:].max() <= r[:half].max() * (1 + 1e-9):
            rho, K = radius, float(r.max())
    if rho is None:
        rho = 0.5 * (radius + 1)
        K = float(_power_ratios(A, rho, n_fit).max())
    check = _power_ratios(A, rho, 10 * n_fit)
    worst = int(np.argmax(check))
    if check[worst] > K * (1 + 1e-9):
        raise InstabilityError(f"decay envelope K={K:.6g}, rho={rho:.6g} fails at n={worst + 1}")
    return DecayCertificate(K, rho, n_fit, 10 * n_fit, radius)


def make_linear_chain(A, noise: NoiseSpec | None = None, n_fit: int = 200) -> tuple[LinearChain, DecayCertificate]:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    cert = decay_certificate(A, n_fit)
    noise = NoiseSpec("gaussian", dim=A.shape[0]) if noise is None else noise
    return LinearChain(A=A, noise=noise), cert


def make_contraction_chain(theta: float, g: str = "tanh", noise: NoiseSpec | None = None, dim: int = 1) -> ContractionChain:
    noise = NoiseSpec("gaussian", dim=dim) if noise is None else noise
    return ContractionChain(theta=theta, g=g, noise=noise, dim=dim)


def linear_log_moment(A, noise: NoiseSpec, delta: float, n: int, x0=None) -> float:
    """Upper bound on log E exp(delta |X_n|) for X_n = A X_{n-1} + xi_n, via |A^j xi| <= ||A^j||_1 |xi|."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    P = np.eye(A.shape[0])
    total = 0.0
    for _ in range(n):
        total += math.log(noise.abs_mgf(delta * float(np.abs(P).sum(axis=0).max())))
        P = P @ A
    if x0 is not None:
        total += delta * float(np.abs(P @ np.asarray(x0, dtype=float).reshape(-1)).sum())
    return total


# -- the sign chain ---------------------------------------------------------------------


def make_sign_chain(m: float, noise: NoiseSpec | None = None) -> SignChain:
    return SignChain(m=m, noise=GAUSSIAN if noise is None else noise, dim=1)


@dataclass(frozen=True)
class ConditionCheck:
    holds: bool
    m: float
    threshold: float  # delta^{-1} log E exp(delta |xi|)
    delta: float
    mgf: float


def mdp_condition_check(m: float, noise: NoiseSpec, delta: float) -> ConditionCheck:
    """Is m > delta^{-1} log E exp(delta |xi_1|)?"""
    if not delta > 0:
        raise ConfigurationError("delta must be positive")
    mgf = noise.abs_mgf(delta)
    if not math.isfinite(mgf):
        raise DeltaTooLargeError(f"E exp(delta |xi|) is infinite at delta={delta:g}")
    threshold = math.log(mgf) / delta
    return ConditionCheck(bool(m > threshold), m, threshold, delta, mgf)


def drift_constants(m: float, noise: NoiseSpec, delta: float) -> tuple[float, float]:
    """(rho, ell) in P V <= rho V + ell for V(x) = exp(delta |x|)."""
    mgf = noise.abs_mgf(delta)
    return math.exp(-delta * m) * mgf, math.exp(delta * m) * mgf


def drift_oracle(m: float, noise: NoiseSpec, delta: float, x: float) -> float:
    """E exp(delta |x - m sign(x) + xi|) by numerical integration (continuous noise) or exact sum."""
    shift = x - m * np.sign(x)
    if noise.is_degenerate:
        return math.exp(delta * abs(shift))
    if noise.family == "discrete":
        return float(sum(p * math.exp(delta * abs(shift + v)) for v, p in zip(noise.values, noise.probs)))
    s = noise.scale
    dist = {"gaussian": stats.norm(0, s), "laplace": stats.laplace(0, s), "uniform": stats.uniform(-s, 2 * s)}[noise.family]
    lo, hi = dist.support()
    lo, hi = max(lo, -40 * s), min(hi, 40 * s)
    # the kink of |shift + z| sits at z = -shift
    pts = [-shift] if lo < -shift < hi else None
    val, _ = integrate.quad(lambda z: math.exp(delta * abs(shift + z)) * dist.pdf(z), lo, hi, points=pts, limit=200, epsabs=0, epsrel=1e-12)
    return float(val)


@dataclass
class DriftRow:
    x: float
    estimate: float
    se: float
    bound: float
    passed: bool


def lyapunov_drift_check(m: float, noise: NoiseSpec, delta: float, probe_states, inner_m: int, rng) -> tuple[list[DriftRow], bool]:
    """Monte Carlo E[V(X_1) | X_0 = x] against rho V(x) + ell at every probe state."""
    cond = mdp_condition_check(m, noise, delta)
    if not cond.holds:
        raise ValidityError(f"drift check needs m > {cond.threshold:.6g} (so that rho < 1); got m={m}")
    rho, ell = drift_constants(m, noise, delta)
    model = make_sign_chain(m, noise)
    rng = as_generator(rng)
    rows = []
    for x in np.atleast_1d(np.asarray(probe_states, dtype=float)):
        nxt = model.drift(np.full((inner_m, 1), x), noise.sample(rng, inner_m))[:, 0]
        v = np.exp(delta * np.abs(nxt))
        est = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(inner_m)) if inner_m > 1 else math.inf
        bound = rho * math.exp(delta * abs(x)) + ell
        rows.append(DriftRow(float(x), est, se, bound, est <= bound + 3 * se))
    return rows, all(r.passed for r in rows)


@dataclass
class SignReduction:
    lhs: float  # n^{-alpha} sum_k sign(X_{k-1})
    rhs: float  # (X_0 - X_n + sum_k xi_k) / (m n^alpha)
    residual: float


def sign_reduction_identity(model: SignChain, path: PathSample, alpha: float) -> SignReduction:
    """The telescoped recursion: sum_k sign(X_{k-1}) = (X_0 - X_n + sum_k xi_k) / m."""
    n = path.n
    s = path.states[:, 0]
    lhs = float(np.sign(s[:-1]).sum()) / n**alpha
    rhs = float(s[0] - s[-1] + path.shocks[:, 0].sum()) / (model.m * n**alpha)
    return SignReduction(lhs, rhs, float(abs(lhs - rhs)))


def sign_chain_envelope(m: float, noise: NoiseSpec, delta: float, alpha: float, eps: float, x0: float = 0.0):
    """Chernoff envelope n -> bound on n^{-(2a-1)} log P(|X_n| > n^a eps) from E V(X_n) <= V(x0) + ell/(1-rho)."""
    rho, ell = drift_constants(m, noise, delta)
    if rho >= 1:
        raise ValidityError("envelope needs rho < 1")
    log_moment = math.log(math.exp(delta * abs(x0)) + ell / (1 - rho))
    return lambda n: chernoff_envelope(n, alpha, eps, delta, log_moment)


def linear_chain_envelope(A, noise: NoiseSpec, delta: float, alpha: float, eps: float, x0=None):
    return lambda n: chernoff_envelope(n, alpha, eps, delta, linear_log_moment(A, noise, delta, n, x0))


# -- the autoregression estimator -------------------------------------------------------


def _estimator_block(theta, g, noise, n_grid, alpha, y_grid, eps, seed, x0, block_id, count):
    rng = stream(seed, "estimator", block_id)
    gf = SLOPE_ONE_MAPS[g]
    x = np.full(count, float(x0))
    num = np.zeros(count)
    den = np.zeros(count)
    cross = np.zeros(count)
    ys = np.asarray(y_grid, dtype=float)
    grid = {n: k for k, n in enumerate(n_grid)}
    moments, hits, den_sum, worst = [], np.zeros((len(n_grid), len(ys)), dtype=np.int64), np.zeros(len(n_grid)), 0.0
    for k in range(1, n_grid[-1] + 1):
        gx = gf(x)
        xi = noise.sample(rng, count)[:, 0]
        x = theta * gx + xi
        num += gx * x
        den += gx * gx
        cross += gx * xi
        if k in grid:
            if np.any(den == 0):
                raise DegenerateDesignError(f"sum of g(X)^2 vanished at n={k}")
            err = theta - num / den
            worst = max(worst, float(np.max(np.abs(err + cross / den))))
            j = grid[k]
            moments.append(RunningMoments.of(math.sqrt(k) * err))
            scaled = k ** (1 - alpha) * err
            hits[j] = (np.abs(scaled[:, None] - ys[None, :]) <= eps).sum(axis=0)
            den_sum[j] = float(den.sum())
    return moments, hits, den_sum, worst


@dataclass
class EstimatorCell:
    n: int
    y: float
    epsilon: float
    hits: int
    R: int
    p_hat: float
    ci_lo: float
    ci_hi: float
    rate_hat: float
    rate_lo: float
    rate_hi: float
    rate_theory: float  # y^2 / (2 B_theta)
    rate_clt: float  # B_theta y^2 / 2, the rate implied by the CLT variance 1/B_theta
    zero_hit: bool


@dataclass
class EstimatorReport:
    theta: float
    g: str
    alpha: float
    n_grid: tuple
    R: int
    B_hat: float
    identity_residual: float
    clt_variance: dict  # n -> (variance, se of variance)
    cells: list = field(default_factory=list)

    def clt_ratio(self, n) -> float:
        """sample variance of sqrt(n)(theta - theta_hat) divided by 1 / B_hat."""
        return self.clt_variance[n][0] * self.B_hat

    def band_check(self, lo: float = 0.6, hi: float = 1.4, which: str = "rate_theory") -> dict:
        n = self.n_grid[-1]
        out = {}
        for c in self.cells:
            target = getattr(c, which)
            if c.n == n and target > 0:
                out[c.y] = bool(not c.zero_hit and lo * target <= c.rate_hat <= hi * target)
        return out


def estimator_experiment(theta: float, g: str = "tanh", n_grid=(256, 1024, 4096, 10_000), alpha: float = 0.6, R: int = 10_000, seed: int = 0, y_grid=(0.5, 1.0), epsilon: float = 0.25, noise: NoiseSpec | None = None, x0: float = 0.0, block_size: int = 2_000, workers: int | None = None) -> EstimatorReport:
    """Least-squares estimate theta_hat_n = sum g(X_{i-1}) X_i / sum g(X_{i-1})^2 over R independent paths."""
    if not abs(theta) < 1:
        raise ConfigurationError("|theta| < 1 required")
    if g not in SLOPE_ONE_MAPS or g == "identity":
        raise ConfigurationError("g must be a bounded map with |g'| <= 1: one of tanh, sin, one")
    if not 0.5 < alpha < 1:
        raise ConfigurationError("alpha must lie strictly inside (0.5, 1)")
    noise = GAUSSIAN if noise is None else noise
    n_grid = tuple(sorted(int(n) for n in n_grid))
    tasks = [(theta, g, noise, n_grid, alpha, tuple(y_grid), epsilon, seed, x0, bid, cnt) for bid, _, cnt in blocks(R, block_size)]
    parts = run_blocks(_estimator_block, tasks, workers)
    moments = [RunningMoments() for _ in n_grid]
    hits = 0
    den_sum = np.zeros(len(n_grid))
    worst = 0.0
    for mom, h, d, w in parts:
        moments = [a.merge(b) for a, b in zip(moments, mom)]
        hits = hits + h
        den_sum += d
        worst = max(worst, w)
    B_hat = float(den_sum[-1] / (R * n_grid[-1]))
    clt = {}
    for n, mom in zip(n_grid, moments):
        # normal-theory se of a sample variance
        clt[n] = (mom.variance, mom.variance * math.sqrt(2.0 / (mom.count - 1)))
    report = EstimatorReport(theta, g, alpha, n_grid, R, B_hat, worst, clt)
    for k, n in enumerate(n_grid):
        speed = n ** (2 * alpha - 1)
        for j, y in enumerate(y_grid):
            h = int(hits[k, j])
            lo, hi = wilson_interval(h, R)
            rate = -math.log(h / R) / speed if h else math.nan
            report.cells.append(
                EstimatorCell(
                    n, float(y), epsilon, h, R, h / R, lo, hi, rate,
                    -math.log(hi) / speed, -math.log(lo) / speed if lo > 0 else math.inf,
                    y * y / (2 * B_hat), B_hat * y * y / 2, h == 0,
                )
            )
    return report


# -- registry ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExampleDescriptor:
    name: str
    summary: str
    parameters: dict
    obligations: tuple


EXAMPLES = {
    "linear_ar": ExampleDescriptor(
        "linear_ar",
        "X_n = 0.5 X_{n-1} + xi_n, standard Gaussian noise, H(x) = x",
        {"A": [[0.5]], "noise": {"family": "gaussian"}, "observable": "identity"},
        ("corrector_oracle", "poisson_residual", "covariance_oracle", "stochastic_exponential", "decomposition", "unit_mean", "local_mdp", "tail_dominance"),
    ),
    "nonlinear_contraction": ExampleDescriptor(
        "nonlinear_contraction",
        "X_n = 0.9 tanh(X_{n-1}) + xi_n with H(x) = tanh(x) centred",
        {"theta": 0.9, "g": "tanh", "noise": {"family": "gaussian"}, "observable": "tanh"},
        ("contraction", "poisson_residual", "martingale_property", "stochastic_exponential_series"),
    ),
    "sign_chain": ExampleDescriptor(
        "sign_chain",
        "X_n = X_{n-1} - 1.2 sign(X_{n-1}) + xi_n, standard Gaussian noise",
        {"m": 1.2, "delta": 1.0, "noise": {"family": "gaussian"}},
        ("mdp_condition", "lyapunov_drift", "sign_reduction", "state_negligibility"),
    ),
    "estimator": ExampleDescriptor(
        "estimator",
        "least-squares estimate of theta = 0.5 in X_n = theta tanh(X_{n-1}) + xi_n",
        {"theta": 0.5, "g": "tanh", "noise": {"family": "gaussian"}},
        ("estimator_identity", "clt_variance", "estimator_mdp_band"),
    ),
}


def describe(name: str) -> ExampleDescriptor:
    try:
        return EXAMPLES[name]
    except KeyError:
        raise ConfigurationError(f"unknown example {name!r}; available: {sorted(EXAMPLES)}") from None
