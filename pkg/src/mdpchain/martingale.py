"""Exponential tail bound for martingales with exponentially integrable differences.

With K dominating both E(zeta^2 | F) and E(|zeta|^3 e^{delta |zeta|} | F) for
``delta = eps / K``, the Chernoff choice ``lambda = eps n / K`` gives

    P(M_n > n eps) <= exp(-(n / K) (eps^2 / 2 - eps^3 / (6 K))),   0 < eps < 3K.

The variant ``exp(-(n / K) eps^2 (1/2 - eps/6))`` is kept for comparison; the two
agree exactly when K = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .chain import ChainModel, _as_batch, _as_state
from .errors import ConfigurationError, DeltaTooLargeError, UnsupportedModelError, ValidityError
from .noise import NoiseSpec
from .poisson import CorrectorField
from .rng import as_generator, blocks, run_blocks, stream
from .stats import wilson_interval


@dataclass(frozen=True, eq=False)
class MartingaleSpec:
    """Difference generator: i.i.d. draws from ``noise`` or corrector increments of a chain.

    Chain-driven differences are ``<direction, U(X_i) - P_{X_{i-1}} U>`` and need the exact corrector.
    """

    noise: NoiseSpec | None = None
    model: ChainModel | None = None
    U: CorrectorField | None = None
    x0: tuple | None = None
    direction: tuple | None = None
    delta: float = 0.1
    K: float | None = None

    def __post_init__(self):
        if (self.noise is None) == (self.model is None):
            raise ConfigurationError("give exactly one of noise (i.i.d. differences) or model (chain-driven)")
        if self.noise is not None and self.noise.dim != 1:
            raise ConfigurationError("i.i.d. differences must be scalar")
        if self.noise is not None and abs(float(self.noise.mean()[0])) > 1e-12:
            raise ConfigurationError("i.i.d. differences must have mean zero")
        if self.model is not None:
            if self.U is None or not self.U.is_exact:
                raise UnsupportedModelError("chain-driven differences need the exact corrector")
            if self.direction is None and self.U.dim_out != 1:
                raise ConfigurationError("direction is required for vector-valued correctors")
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")

    @property
    def is_iid(self) -> bool:
        return self.noise is not None

    def _project(self, v):
        if self.direction is None:
            return v[:, 0]
        return v @ np.asarray(self.direction, dtype=float)

    def start(self, count: int) -> np.ndarray:
        if self.is_iid:
            return np.zeros((count, 1))
        x0 = np.zeros(self.model.dim) if self.x0 is None else _as_state(self.model, self.x0)
        return np.repeat(x0[None, :], count, axis=0)

    def step(self, x: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
        """One difference per row of ``x``; returns (zeta, next state)."""
        if self.is_iid:
            return self.noise.sample(rng, x.shape[0])[:, 0], x
        nxt = self.model.drift(x, self.model.noise.sample(rng, x.shape[0]))
        return self._project(self.U.evaluate(nxt) - self.U.conditional_mean(x)), nxt

    def conditional_draws(self, x, m: int, rng) -> np.ndarray:
        """``m`` draws of zeta given the previous state ``x``."""
        if self.is_iid:
            return self.noise.sample(rng, m)[:, 0]
        xs = np.repeat(_as_state(self.model, x)[None, :], m, axis=0)
        return self.step(xs, rng)[0]


@dataclass
class MomentBound:
    states: np.ndarray
    second: np.ndarray
    second_se: np.ndarray
    third_exp: np.ndarray  # E |zeta|^3 e^{delta |zeta|}
    third_exp_se: np.ndarray
    delta: float
    K: float
    K_se: float


def conditional_moment_bound(spec: MartingaleSpec, probe_states, m: int, rng, delta: float | None = None) -> MomentBound:
    """Monte Carlo E(zeta^2 | x) and E(|zeta|^3 e^{delta|zeta|} | x) at each probe state; K is their maximum."""
    if m < 1000:
        raise ConfigurationError("conditional moment estimates need m >= 1000 per probe state")
    delta = spec.delta if delta is None else float(delta)
    rng = as_generator(rng)
    if spec.is_iid:
        states = np.zeros((1, 1))
        if not math.isfinite(spec.noise.abs_moment(3, delta)):
            raise DeltaTooLargeError(f"E|zeta|^3 e^(delta|zeta|) diverges at delta={delta:g}")
    else:
        states = _as_batch(spec.model, probe_states)
    sec, sec_se, thr, thr_se = [], [], [], []
    for x in states:
        z = np.abs(spec.conditional_draws(x, m, rng))
        with np.errstate(over="ignore"):
            w = z**3 * np.exp(delta * z)
        if not np.all(np.isfinite(w)):
            raise DeltaTooLargeError(f"third exponential moment overflows at delta={delta:g}")
        s2 = z * z
        sec.append(s2.mean())
        sec_se.append(s2.std(ddof=1) / math.sqrt(m))
        thr.append(w.mean())
        thr_se.append(w.std(ddof=1) / math.sqrt(m))
        if thr[-1] > 0 and thr_se[-1] > 0.25 * thr[-1]:
            raise DeltaTooLargeError(f"third exponential moment estimate unstable at delta={delta:g} (relative se {thr_se[-1] / thr[-1]:.2f})")
    sec, sec_se, thr, thr_se = map(np.asarray, (sec, sec_se, thr, thr_se))
    both = np.concatenate([sec, thr])
    both_se = np.concatenate([sec_se, thr_se])
    k = int(np.argmax(both))
    return MomentBound(states, sec, sec_se, thr, thr_se, delta, float(both[k]), float(both_se[k]))


def self_consistent_K(second: float, third_exp, epsilon: float, hi: float = 1e6) -> float:
    """Smallest K with K >= max(second, third_exp(eps / K)), where ``third_exp(delta)`` is nondecreasing.

    With delta = eps / K the right side decreases in K, so any larger K is valid too.
    """
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")

    def gap(K):
        return K - max(second, third_exp(epsilon / K))

    lo = max(second, third_exp(0.0), 1e-300)
    if gap(lo) >= 0:
        return lo
    if gap(hi) < 0:
        raise DeltaTooLargeError("no finite K dominates the moment combination")
    return float(brentq(gap, lo, hi, xtol=1e-12, rtol=1e-12))


@dataclass
class TailBound:
    derived: float
    printed: float  # nan outside eps < 3
    lam: float
    K: float
    epsilon: float
    n: int


def exponential_tail_bound(K: float, epsilon: float, n: int, two_sided: bool = False) -> TailBound:
    """Chernoff bound on P(M_n > n eps) with lambda = eps n / K; ``two_sided`` sums both one-sided bounds."""
    if n < 0:
        raise ConfigurationError("n must be >= 0")
    if K < 0:
        raise ConfigurationError("K must be non-negative")
    factor = 2.0 if two_sided else 1.0
    if n == 0:
        return TailBound(1.0, 1.0, 0.0, K, epsilon, 0)
    if not epsilon > 0:
        raise ValidityError("epsilon must be positive")
    if K == 0:
        # zeta is zero: M_n > n eps is impossible
        return TailBound(0.0, 0.0, math.inf, K, epsilon, n)
    if epsilon >= 3 * K:
        raise ValidityError(f"epsilon={epsilon:g} outside the validity range 0 < epsilon < 3K = {3 * K:g}")
    derived = math.exp(-(n / K) * (epsilon**2 / 2 - epsilon**3 / (6 * K)))
    printed = math.exp(-(n / K) * epsilon**2 * (0.5 - epsilon / 6)) if epsilon < 3 else math.nan
    return TailBound(factor * derived, factor * printed, epsilon * n / K, K, epsilon, n)


def _tail_block(spec, epsilon, n_grid, two_sided, seed, block_id, count):
    rng = stream(seed, "martingale", block_id)
    x = spec.start(count)
    M = np.zeros(count)
    grid = {n: k for k, n in enumerate(n_grid)}
    hits = np.zeros(len(n_grid), dtype=np.int64)
    for k in range(1, n_grid[-1] + 1):
        z, x = spec.step(x, rng)
        M += z
        if k in grid:
            over = np.abs(M) if two_sided else M
            hits[grid[k]] = int((over > k * epsilon).sum())
    return hits


@dataclass
class DominanceRow:
    n: int
    epsilon: float
    K: float
    hits: int
    R: int
    p_hat: float
    ci_hi: float
    bound_derived: float
    bound_printed: float
    dominance: bool | None  # None: zero hits and 3/R above the bound

    def as_row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DominanceResult:
    rows: list

    @property
    def dominance(self) -> bool | None:
        flags = [r.dominance for r in self.rows]
        if any(f is False for f in flags):
            return False
        if all(f is None for f in flags):
            return None
        return True

    @property
    def inconclusive(self) -> list:
        return [r.n for r in self.rows if r.dominance is None]


def empirical_tail_dominance(spec: MartingaleSpec, epsilon: float, n_grid, R: int, seed: int, K: float | None = None, two_sided: bool = False, block_size: int = 20_000, workers: int | None = None) -> DominanceResult:
    """Hit counts of M_n > n eps per n, compared against the tail bound through the Wilson upper limit."""
    K = spec.K if K is None else K
    if K is None:
        raise ConfigurationError("K must be given (spec.K or argument)")
    if R < 1000:
        raise ConfigurationError("need at least 1000 replicates")
    n_grid = tuple(sorted(int(n) for n in n_grid))
    tasks = [(spec, epsilon, n_grid, two_sided, seed, bid, cnt) for bid, _, cnt in blocks(R, block_size)]
    hits = sum(run_blocks(_tail_block, tasks, workers))
    rows = []
    for n, h in zip(n_grid, hits):
        b = exponential_tail_bound(K, epsilon, n, two_sided)
        h = int(h)
        hi = wilson_interval(h, R)[1]
        if h > 0:
            flag = hi <= b.derived
        else:
            flag = True if 3.0 / R <= b.derived else None
        rows.append(DominanceRow(n, epsilon, K, h, R, h / R, hi, b.derived, b.printed, flag))
    return DominanceResult(rows)


def gaussian_tail_dominance(sigma: float, epsilon: float, n_grid, K: float, two_sided: bool = False) -> list[dict]:
    """Exact P(M_n > n eps) = sf(eps sqrt(n) / sigma) for Gaussian differences, against the bound."""
    out = []
    for n in n_grid:
        exact = norm.sf(epsilon * math.sqrt(n) / sigma) * (2 if two_sided else 1)
        b = exponential_tail_bound(K, epsilon, int(n), two_sided)
        out.append({"n": int(n), "exact": float(exact), "bound_derived": b.derived, "bound_printed": b.printed, "dominance": bool(exact <= b.derived)})
    return out
