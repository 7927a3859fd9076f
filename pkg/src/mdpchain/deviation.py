"""Monte Carlo experiments at the moderate-deviation scale.

Statistics of interest are ``S_n = n^{-alpha} sum_{i<n} H(X_i)`` and the martingale
``M_n = sum_i zeta_i`` with ``zeta_i = U(X_i) - P_{X_{i-1}} U``.  Probabilities of
Euclidean balls around ``y`` are turned into normalised rates
``-n^{-(2 alpha - 1)} log p`` and compared with the quadratic rate function.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .chain import ChainModel, PathSample, _as_batch, _as_state, l1
from .errors import ConfigurationError, ExponentOverflowError, PlanInfeasibleError, UnsupportedModelError
from .observables import Observable
from .poisson import CorrectorField
from .rate import RateModel, rate_value, regularized_rate
from .rng import as_generator, blocks, run_blocks, stream
from .stats import RunningMoments, mean_se, rule_of_three, wilson_interval

QUANTITIES = ("state_norm", "corrector_abs", "sum_norm")


@dataclass(frozen=True)
class ExperimentPlan:
    alpha: float = 0.6
    n_grid: tuple = (256, 1024, 4096)
    y_grid: tuple = ((0.5,), (1.0,))
    epsilon: float = 0.25
    replicates: int = 1_000_000
    lambda_grid: tuple = ((1.0,),)
    beta: float | None = None
    master_seed: int = 20240101
    block_size: int = 20_000
    x0: tuple | None = None
    preflight_margin: float = 1.0
    target: str = "sum"

    def __post_init__(self):
        if not 0.5 < self.alpha < 1:
            raise ConfigurationError(f"alpha must lie strictly inside (0.5, 1), got {self.alpha}")
        n_grid = tuple(int(n) for n in self.n_grid)
        if not n_grid or n_grid[0] < 1 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
            raise ConfigurationError("n_grid must be a non-empty strictly increasing list of positive integers")
        object.__setattr__(self, "n_grid", n_grid)
        object.__setattr__(self, "y_grid", tuple(tuple(float(v) for v in np.atleast_1d(y)) for y in self.y_grid))
        object.__setattr__(self, "lambda_grid", tuple(tuple(float(v) for v in np.atleast_1d(l)) for l in self.lambda_grid))
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if int(self.replicates) < 1000:
            raise ConfigurationError("probability cells need at least 1000 replicates")
        if self.beta is not None and self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.block_size < 1:
            raise ConfigurationError("block_size must be >= 1")
        if self.target not in ("sum", "martingale"):
            raise ConfigurationError("target must be 'sum' or 'martingale'")

    @property
    def speed(self) -> np.ndarray:
        return np.asarray(self.n_grid, dtype=float) ** (2 * self.alpha - 1)


def _x0(model, x0):
    return np.zeros(model.dim) if x0 is None else _as_state(model, x0)


def sum_statistic(model: ChainModel, H: Observable, x0, n: int, alpha: float, rng) -> np.ndarray:
    """n^{-alpha} sum_{i=1..n} H(X_{i-1}) along one fresh path."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    rng = as_generator(rng)
    x = _x0(model, x0)[None, :]
    total = np.zeros(H.dim_out)
    for k in range(n):
        total += H(x)[0]
        if k < n - 1:
            x = model.drift(x, model.noise.sample(rng, 1))
    return total / n**alpha


# -- decomposition and the stochastic exponential --------------------------------------------


def _conditional_means(model, U, states, inner_m, rng):
    """P_x U at each state: exact for the linear corrector, fresh inner Monte Carlo otherwise."""
    if U.is_exact:
        return U.conditional_mean(states), np.zeros((states.shape[0], U.dim_out))
    rng = as_generator(rng)
    b = states.shape[0]
    V = U.evaluate(model.drift(np.repeat(states, inner_m, axis=0), model.noise.sample(rng, b * inner_m))).reshape(b, inner_m, U.dim_out)
    return V.mean(axis=1), V.std(axis=1, ddof=1) / math.sqrt(inner_m)


@dataclass
class Decomposition:
    statistic: np.ndarray
    corrector_term: np.ndarray
    martingale_term: np.ndarray
    residual: np.ndarray
    residual_bound: float


def decomposition(model: ChainModel, H: Observable, U: CorrectorField, path: PathSample, alpha: float, inner_m: int = 64, rng=None) -> Decomposition:
    """Split S_n into the corrector term n^{-a}(U(X_0) - U(X_n)) and the martingale term n^{-a} M_n."""
    states = path.states
    n = path.n
    scale = n**alpha
    S = H(states[:-1]).sum(axis=0) / scale
    u = U.evaluate(states)
    pu, pu_se = _conditional_means(model, U, states[:-1], inner_m, rng)
    zeta = u[1:] - pu
    corr = (u[0] - u[-1]) / scale
    mart = zeta.sum(axis=0) / scale
    residual = S - corr - mart
    if U.is_exact:
        bound = 0.0
    else:
        mc = 3.0 * float(np.sqrt((pu_se**2).sum(axis=0)).max()) / scale
        bound = n ** (1 - alpha) * 2 * U.tol + mc
    return Decomposition(S, corr, mart, residual, bound)


@dataclass
class StochasticExponential:
    normalized: float  # n^{2a-1} log E_n(lambda)
    log_value: float  # log E_n(lambda)
    se: float  # standard error of ``normalized``
    exact: bool


def _log_laplace_terms(model, U, states, lam, scale, inner_m, rng, chunk=1024):
    if U.is_exact and U.zeta_cov is not None:
        q = float(lam @ U.zeta_cov @ lam) / (2.0 * scale * scale)
        return np.full(states.shape[0], q), np.zeros(states.shape[0]), True
    if inner_m < 32:
        raise ConfigurationError("Monte Carlo conditional Laplace transforms need inner_m >= 32")
    rng = as_generator(rng)
    logs = np.empty(states.shape[0])
    ses = np.empty(states.shape[0])
    for lo in range(0, states.shape[0], chunk):
        block = states[lo : lo + chunk]
        b = block.shape[0]
        V = U.evaluate(model.drift(np.repeat(block, inner_m, axis=0), model.noise.sample(rng, b * inner_m))).reshape(b, inner_m, U.dim_out)
        proj = V @ lam / scale
        dev = proj - proj.mean(axis=1, keepdims=True)
        if np.max(dev, initial=0.0) > 700:
            raise ExponentOverflowError(f"conditional exponent {np.max(dev):.1f} overflows; reduce |lambda| (currently {np.linalg.norm(lam):.3g})")
        logs[lo : lo + b] = logsumexp(dev, axis=1) - math.log(inner_m)
        w = np.exp(dev)
        ses[lo : lo + b] = w.std(axis=1, ddof=1) / (math.sqrt(inner_m) * w.mean(axis=1))
    return logs, ses, False


def stochastic_exponential(model: ChainModel, U: CorrectorField, path: PathSample, lam, alpha: float, inner_m: int = 64, rng=None) -> StochasticExponential:
    """n^{2a-1} sum_i log E[exp(<lam, zeta_i> / n^a) | X_{i-1}] along ``path``."""
    n = path.n
    lam = np.asarray(lam, dtype=float).reshape(U.dim_out)
    if not np.any(lam):
        return StochasticExponential(0.0, 0.0, 0.0, U.is_exact)
    logs, ses, exact = _log_laplace_terms(model, U, path.states[:-1], lam, n**alpha, inner_m, rng)
    speed = n ** (2 * alpha - 1)
    total = float(logs.sum())
    return StochasticExponential(speed * total, total, speed * float(np.sqrt((ses**2).sum())), exact)


def _simulate_martingale(model, U, x0, n, R, rng):
    """Final M_n over R replicates (exact corrector only)."""
    x = np.repeat(_x0(model, x0)[None, :], R, axis=0)
    M = np.zeros((R, U.dim_out))
    for _ in range(n):
        nxt = model.drift(x, model.noise.sample(rng, R))
        M += U.evaluate(nxt) - U.conditional_mean(x)
        x = nxt
    return M


def unit_mean_identity(model: ChainModel, U: CorrectorField, n: int, lam, R: int, rng, x0=None) -> tuple[float, float]:
    """Mean and standard error of exp(<lam, M_n>/n - log E_n(lam)) with E_n built on zeta_i / n."""
    if not (U.is_exact and U.zeta_cov is not None):
        raise UnsupportedModelError("the unit-mean identity check needs the exact linear-Gaussian corrector")
    rng = as_generator(rng)
    lam = np.asarray(lam, dtype=float).reshape(U.dim_out)
    M = _simulate_martingale(model, U, x0, n, R, rng)
    log_e = n * float(lam @ U.zeta_cov @ lam) / (2.0 * n * n)
    w = np.exp(M @ lam / n - log_e)
    mean, se = mean_se(w)
    return float(mean), float(se)


@dataclass
class MartingaleCheck:
    state: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    passed: bool


def martingale_difference_check(model: ChainModel, U: CorrectorField, states, m: int, rng) -> list[MartingaleCheck]:
    """E[zeta | X_{i-1} = x] should vanish; one Monte Carlo test per state."""
    rng = as_generator(rng)
    out = []
    for x in _as_batch(model, states):
        xs = np.repeat(x[None, :], m, axis=0)
        V = U.evaluate(model.drift(xs, model.noise.sample(rng, m)))
        if U.is_exact:
            zeta = V - U.conditional_mean(x[None, :])[0]
            mean, se = mean_se(zeta)
        else:
            W = U.evaluate(model.drift(xs, model.noise.sample(rng, m)))
            mean = V.mean(axis=0) - W.mean(axis=0)
            se = np.sqrt(V.var(axis=0, ddof=1) / m + W.var(axis=0, ddof=1) / m)
        out.append(MartingaleCheck(x, mean, se, bool(np.all(np.abs(mean) <= 3 * se + 1e-12))))
    return out


@dataclass
class ExponentLimitRow:
    lam: tuple
    n: int
    value: float
    se: float
    target: float
    gap: float


def exponent_limit_check(model: ChainModel, U: CorrectorField, B, lambda_grid, n_grid, alpha: float, seed: int, inner_m: int = 64, paths: int = 1, x0=None) -> tuple[list[ExponentLimitRow], dict]:
    """Track |n^{2a-1} log E_n(lam) - <lam, B lam>/2| along ``n_grid``."""
    from .chain import simulate_path

    B = B.B if isinstance(B, RateModel) else np.atleast_2d(np.asarray(B, dtype=float))
    rows = []
    verdicts = {}
    for li, lam in enumerate(lambda_grid):
        lam = np.asarray(lam, dtype=float).reshape(U.dim_out)
        target = 0.5 * float(lam @ B @ lam)
        prev = None
        ok = True
        for n in n_grid:
            vals = []
            ses = []
            for r in range(paths):
                path = simulate_path(model, _x0(model, x0), n, stream(seed, "exponent-path", li, n, r))
                se_ = stochastic_exponential(model, U, path, lam, alpha, inner_m, stream(seed, "exponent-inner", li, n, r))
                vals.append(se_.normalized)
                ses.append(se_.se)
            value = float(np.mean(vals))
            se = float(np.sqrt(np.sum(np.square(ses))) / paths)
            if paths > 1:
                se = max(se, float(np.std(vals, ddof=1) / math.sqrt(paths)))
            gap = abs(value - target)
            row = ExponentLimitRow(tuple(lam.tolist()), int(n), value, se, target, gap)
            if prev is not None and gap > prev.gap + 3 * math.hypot(se, prev.se) + 1e-12 * (1 + abs(target)):
                ok = False
            rows.append(row)
            prev = row
        verdicts[tuple(lam.tolist())] = ok
    return rows, verdicts


# -- ball probabilities -----------------------------------------------------------------


def _mdp_block(model, H, U, plan, block_id, count):
    rng = stream(plan.master_seed, "mdp", block_id)
    x = np.repeat(_x0(model, plan.x0)[None, :], count, axis=0)
    p = H.dim_out
    total = np.zeros((count, p))
    ys = np.asarray(plan.y_grid, dtype=float)
    hits = np.zeros((len(plan.n_grid), len(ys)), dtype=np.int64)
    grid = {n: k for k, n in enumerate(plan.n_grid)}
    reg = None
    if plan.beta:
        reg_rng = stream(plan.master_seed, "regularize", block_id)
        walk = np.zeros((count, p))
        last = 0
    for k in range(1, plan.n_grid[-1] + 1):
        xi = model.noise.sample(rng, count)
        nxt = model.drift(x, xi)
        if plan.target == "sum":
            total += H(x)
        else:
            total += U.evaluate(nxt) - U.conditional_mean(x)
        x = nxt
        if k in grid:
            stat = total.copy()
            if plan.beta:
                walk += reg_rng.standard_normal((count, p)) * math.sqrt(k - last)
                last = k
                stat += math.sqrt(plan.beta) * walk
            stat /= k**plan.alpha
            dist = np.linalg.norm(stat[:, None, :] - ys[None, :, :], axis=2)
            hits[grid[k]] = (dist <= plan.epsilon).sum(axis=0)
    return hits


@dataclass
class DeviationCell:
    alpha: float
    n: int
    y: tuple
    epsilon: float
    hits: int
    replicates: int
    p_hat: float
    ci_lo: float
    ci_hi: float
    rate_hat: float  # nan when there are no hits
    rate_lo: float
    rate_hi: float
    rate_theory: float
    zero_hit: bool
    rule3_bound: float  # log(3/R): upper bound on log p for zero-hit cells

    def as_row(self) -> dict:
        row = dataclasses.asdict(self)
        row["y"] = list(self.y)
        return row


@dataclass
class DeviationEstimate:
    plan: ExperimentPlan
    cells: list
    slopes: dict = field(default_factory=dict)

    def cell(self, n, y) -> DeviationCell:
        y = tuple(float(v) for v in np.atleast_1d(y))
        for c in self.cells:
            if c.n == n and c.y == y:
                return c
        raise KeyError((n, y))

    def band_check(self, lo: float = 0.6, hi: float = 1.4, n=None) -> dict:
        """r_hat inside [lo I(y), hi I(y)] at ``n`` (default: largest n) for each y with 0 < I(y) < inf."""
        n = self.plan.n_grid[-1] if n is None else n
        out = {}
        for c in self.cells:
            if c.n != n or not (0 < c.rate_theory < math.inf):
                continue
            out[c.y] = bool(not c.zero_hit and lo * c.rate_theory <= c.rate_hat <= hi * c.rate_theory)
        return out

    def trend_check(self) -> dict:
        """Per y: |r_hat - I(y)| nonincreasing in n, where overlapping rate intervals excuse an increase."""
        out = {}
        for y in self.plan.y_grid:
            row = [self.cell(n, y) for n in self.plan.n_grid]
            ok = True
            for a, b in zip(row, row[1:]):
                if a.zero_hit or b.zero_hit or not math.isfinite(a.rate_theory):
                    continue
                ga = abs(a.rate_hat - a.rate_theory)
                gb = abs(b.rate_hat - b.rate_theory)
                wa = 0.5 * (a.rate_hi - a.rate_lo)
                wb = 0.5 * (b.rate_hi - b.rate_lo)
                if gb - ga > wa + wb:
                    ok = False
            out[y] = ok
        return out


def theoretical_rate(rm: RateModel | None, y, beta: float | None = None) -> float:
    if rm is None:
        return math.nan
    if beta:
        return regularized_rate(rm.B, beta, y)
    return rate_value(rm, y)


def preflight(plan: ExperimentPlan, rm: RateModel | None) -> list:
    """Cells expected to collect at least 10 hits: R exp(-n^{2a-1}(I(y) + margin)) >= 10."""
    feasible = []
    infeasible = []
    for n, speed in zip(plan.n_grid, plan.speed):
        for y in plan.y_grid:
            rate = theoretical_rate(rm, y, plan.beta)
            if math.isnan(rate):
                feasible.append((n, y))
                continue
            expected = plan.replicates * math.exp(-speed * (rate + plan.preflight_margin)) if math.isfinite(rate) else 0.0
            (feasible if expected >= 10 else infeasible).append((n, y))
    n_max = plan.n_grid[-1]
    bad = [c for c in infeasible if c[0] == n_max]
    if bad:
        raise PlanInfeasibleError(f"cells {bad} expect fewer than 10 hits; feasible cells: {feasible}", feasible)
    return feasible


def _rate_from_p(p, speed):
    return -math.log(p) / speed if p > 0 else math.inf


def empirical_mdp(plan: ExperimentPlan, model: ChainModel, H: Observable, rm: RateModel | None, U: CorrectorField | None = None, workers: int | None = None, check_feasible: bool = True) -> DeviationEstimate:
    """Estimate P(||S_n - y|| <= eps) for every (n, y) cell and compare rates with I(y)."""
    if plan.target == "martingale" and (U is None or not U.is_exact):
        raise UnsupportedModelError("martingale target needs the exact corrector")
    if check_feasible:
        preflight(plan, rm)
    tasks = [(model, H, U, plan, bid, cnt) for bid, _, cnt in blocks(plan.replicates, plan.block_size)]
    hits = sum(run_blocks(_mdp_block, tasks, workers))
    R = plan.replicates
    cells = []
    for k, (n, speed) in enumerate(zip(plan.n_grid, plan.speed)):
        for j, y in enumerate(plan.y_grid):
            h = int(hits[k, j])
            lo, hi = wilson_interval(h, R)
            p = h / R
            rate = _rate_from_p(p, speed) if h else math.nan
            cells.append(
                DeviationCell(
                    plan.alpha, int(n), y, plan.epsilon, h, R, p, lo, hi,
                    rate, _rate_from_p(hi, speed), _rate_from_p(lo, speed) if lo > 0 else math.inf,
                    theoretical_rate(rm, y, plan.beta), h == 0, math.log(rule_of_three(R)),
                )
            )
    est = DeviationEstimate(plan, cells)
    for n in plan.n_grid:
        pts = [(c.rate_theory, c.rate_hat) for c in cells if c.n == n and not c.zero_hit and 0 < c.rate_theory < math.inf]
        if pts:
            t, r = np.array(pts).T
            est.slopes[n] = float((t * r).sum() / (t * t).sum())
    return est


def gaussian_regularize(plan: ExperimentPlan, beta: float) -> ExperimentPlan:
    """Plan whose statistic gains sqrt(beta) * sum of i.i.d. standard Gaussian vectors."""
    if beta < 0:
        raise ConfigurationError("beta must be non-negative")
    if beta == 0:
        return plan
    return dataclasses.replace(plan, beta=float(beta))


# -- negligibility probes ---------------------------------------------------------------


def _probe_block(model, quantity, alpha, n_grid, eps, seed, x0, U, H, block_id, count):
    rng = stream(seed, "negligibility", quantity, block_id)
    x = np.repeat(_x0(model, x0)[None, :], count, axis=0)
    grid = {n: k for k, n in enumerate(n_grid)}
    hits = np.zeros(len(n_grid), dtype=np.int64)
    total = np.zeros((count, H.dim_out)) if quantity == "sum_norm" else None
    for k in range(1, n_grid[-1] + 1):
        if total is not None:
            total += H(x)
        x = model.drift(x, model.noise.sample(rng, count))
        if k in grid:
            if quantity == "state_norm":
                q = l1(x)
            elif quantity == "corrector_abs":
                q = l1(U.evaluate(x))
            else:
                q = np.linalg.norm(total, axis=1)
            hits[grid[k]] = int((q > k**alpha * eps).sum())
    return hits


@dataclass
class ProbeRow:
    n: int
    hits: int
    replicates: int
    p_hat: float
    ci_hi: float
    normalized_log_p: float  # -inf when no hits
    rule3_normalized: float
    envelope: float | None = None


@dataclass
class ProbeResult:
    quantity: str
    alpha: float
    epsilon: float
    rows: list
    passed: bool

    @property
    def envelope_dominates(self) -> bool | None:
        flags = [r.ci_hi <= 1.0 and (r.hits == 0 or r.normalized_log_p <= r.envelope + 1e-12) for r in self.rows if r.envelope is not None]
        return all(flags) if flags else None


def chernoff_envelope(n: int, alpha: float, eps: float, delta: float, log_moment: float) -> float:
    """Normalised Chernoff bound -n^{1-a} delta eps + log E exp(delta |X_n|) / n^{2a-1}."""
    return -(n ** (1 - alpha)) * delta * eps + log_moment / n ** (2 * alpha - 1)


def _strictly_decreasing_with_zero_hits(values, zero):
    # zero-hit cells count as log p = -inf; a positive-hit cell after one breaks monotonicity
    seen_zero = False
    prev = None
    for v, z in zip(values, zero):
        if z:
            seen_zero = True
            continue
        if seen_zero:
            return False
        if prev is not None and not v < prev:
            return False
        prev = v
    return True


def negligibility_probe(model: ChainModel, quantity: str, alpha: float, n_grid, eps: float, R: int, seed: int, U: CorrectorField | None = None, H: Observable | None = None, x0=None, block_size: int = 20_000, workers: int | None = None, envelope=None) -> ProbeResult:
    """Normalised log P(quantity_n > n^a eps) per n; PASS iff it keeps decreasing over the top half of n_grid.

    ``envelope`` is an optional callable ``n -> bound`` on the normalised log probability.
    """
    if quantity not in QUANTITIES:
        raise ConfigurationError(f"quantity must be one of {QUANTITIES}")
    if not 0.5 < alpha < 1:
        raise ConfigurationError("alpha must lie strictly inside (0.5, 1)")
    n_grid = tuple(int(n) for n in n_grid)
    if quantity == "corrector_abs" and U is None:
        raise ConfigurationError("corrector_abs probe needs a corrector")
    if quantity == "sum_norm" and H is None:
        raise ConfigurationError("sum_norm probe needs an observable")
    if quantity == "corrector_abs" and U.is_exact and not np.any(U.G) and not np.any(U.offset):
        hits = np.zeros(len(n_grid), dtype=np.int64)
    else:
        tasks = [(model, quantity, alpha, n_grid, eps, seed, x0, U, H, bid, cnt) for bid, _, cnt in blocks(R, block_size)]
        hits = sum(run_blocks(_probe_block, tasks, workers))
    rows = []
    for n, h in zip(n_grid, hits):
        speed = n ** (2 * alpha - 1)
        p = int(h) / R
        rows.append(
            ProbeRow(
                n, int(h), R, p, wilson_interval(int(h), R)[1],
                math.log(p) / speed if h else -math.inf,
                math.log(rule_of_three(R)) / speed,
                None if envelope is None else float(envelope(n)),
            )
        )
    top = rows[len(rows) // 2 :] if len(rows) > 1 else rows
    if all(r.hits == 0 for r in rows):
        passed = True
    else:
        passed = _strictly_decreasing_with_zero_hits([r.normalized_log_p for r in top], [r.hits == 0 for r in top])
    return ProbeResult(quantity, alpha, eps, rows, passed)


def gaussian_negligibility(beta: float, eta: float, alpha: float, n_grid, R: int, seed: int) -> list[dict]:
    """n^{-(2a-1)} log P(sqrt(beta) sum_{i<=n} theta_i > n^a eta) against the -eta^2/(2 beta) envelope."""
    rng = stream(seed, "gaussian-negligibility")
    out = []
    walk = np.zeros(R)
    last = 0
    for n in sorted(int(v) for v in n_grid):
        walk += rng.standard_normal(R) * math.sqrt(n - last)
        last = n
        h = int((math.sqrt(beta) * walk > n**alpha * eta).sum())
        speed = n ** (2 * alpha - 1)
        lo, hi = wilson_interval(h, R)
        out.append({
            "n": n, "hits": h, "replicates": R, "p_hat": h / R, "ci_lo": lo, "ci_hi": hi,
            "normalized_log_p": math.log(h / R) / speed if h else -math.inf,
            "envelope": -eta * eta / (2 * beta),
            "consistent": lo <= math.exp(-speed * eta * eta / (2 * beta)),
        })
    return out
