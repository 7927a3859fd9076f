"""Corrector U solving the Poisson equation U(x) = H(x) + P_x U.

Two constructions are available.  For linear chains with linear observables the
solution is ``U(x) = C (I - A)^{-1} x``.  Otherwise ``U`` is the truncated series
``H(x) + sum_{n=1..N} P^n_x H`` with Monte Carlo transition means; the depth N comes
from the geometric envelope ``K (c + |x|) rho^(N+1) / (1 - rho)`` of the tail.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainModel, LinearChain, _as_batch, _as_state, l1, simulate_batch
from .errors import ConfigurationError, InstabilityError, UnsupportedModelError
from .observables import LinearObservable, Observable
from .rng import as_generator, point_stream


def transition_mean(model: ChainModel, H: Observable, x, n: int, m: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Estimate ``P^n_x H = E[H(X_n) | X_0 = x]`` from ``m`` independent paths."""
    if m < 2 or n < 1:
        raise ConfigurationError("transition_mean needs m >= 2 and n >= 1")
    x = _as_state(model, x)
    _, kept = simulate_batch(model, np.repeat(x[None, :], m, axis=0), n, rng, keep=[n])
    values = H(kept[0])
    return values.mean(axis=0), values.std(axis=0, ddof=1) / math.sqrt(m)


def _stationary_mean_scale(model: ChainModel) -> float:
    """max(1, (|f(0,0)| + l E|xi|) / (1 - rho)), the mean-absolute envelope of the invariant law."""
    rho = model.lipschitz_rho
    f00 = float(l1(model.f_at_origin()))
    return max(1.0, (f00 + model.noise_lipschitz * model.noise.abs_mean()) / (1.0 - rho))


def truncation_depth(K: float, rho: float, scale: float, tol: float) -> int:
    """Smallest N >= 1 whose tail envelope K scale rho^(N+1)/(1-rho) is below tol/2."""
    if K == 0 or rho == 0:
        return 1
    target = tol / 2 * (1 - rho) / (K * scale)
    return max(1, math.ceil(math.log(target) / math.log(rho) - 1 + 1e-12))


def tail_envelope(K: float, rho: float, scale: float, N: int) -> float:
    return K * scale * rho ** (N + 1) / (1 - rho)


@dataclass
class CorrectorValue:
    value: np.ndarray
    truncation_N: int
    inner_m: int
    se: np.ndarray
    tail_bound: float
    mode: str


def _series_point(model, H, x, tol, rng, m_max, antithetic, pilot=256):
    rho = model.lipschitz_rho
    K = H.lipschitz_K
    if K is None:
        raise ConfigurationError("series corrector needs the observable's Lipschitz constant")
    scale = _stationary_mean_scale(model) + float(l1(x))
    N = truncation_depth(K, rho, scale, tol)
    tail = tail_envelope(K, rho, scale, N)
    hx = H(x[None, :])[0]
    if H.is_zero:
        return CorrectorValue(np.zeros(H.dim_out), N, 0, np.zeros(H.dim_out), 0.0, "series_mc")
    use_pairs = antithetic and model.noise.is_symmetric and not np.any(model.noise.mean())

    def draw(count):
        # per-replicate sums of H(X_1..X_N); antithetic pairs share |xi| with opposite signs
        shocks = model.noise.sample(rng, count * N).reshape(N, count, model.noise.dim)
        if use_pairs:
            shocks = np.concatenate([shocks, -shocks], axis=1)
        xs = np.repeat(x[None, :], shocks.shape[1], axis=0)
        total = np.zeros((shocks.shape[1], H.dim_out))
        for k in range(N):
            xs = model.drift(xs, shocks[k])
            total += H(xs)
        if use_pairs:
            total = 0.5 * (total[:count] + total[count:])
        return total

    sums = draw(pilot)
    target_se = tol / 4
    sd = sums.std(axis=0, ddof=1).max()
    need = pilot if sd == 0 else math.ceil((sd / target_se) ** 2)
    need = min(max(need, pilot), m_max)
    if need > pilot:
        sums = np.concatenate([sums, draw(need - pilot)])
    m = sums.shape[0]
    value = hx + sums.mean(axis=0)
    se = sums.std(axis=0, ddof=1) / math.sqrt(m)
    return CorrectorValue(value, N, m * (2 if use_pairs else 1), se, tail, "series_mc")


def solve_corrector(model: ChainModel, H: Observable, x, tol: float, rng, m_max: int = 2_000_000, antithetic: bool = True) -> CorrectorValue:
    """U(x) to within ``tol``: tail envelope below tol/2 and Monte Carlo error (two standard errors) below tol/2."""
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    x = _as_state(model, x)
    if model.lipschitz_rho is None:
        if model.is_linear and isinstance(H, LinearObservable):
            U = exact_corrector_linear(model.A, H.C, noise=model.noise)
            return CorrectorValue(U(x), 0, 0, np.zeros(H.dim_out), 0.0, "linear_exact")
        raise UnsupportedModelError("series corrector needs a declared Lipschitz rho < 1 (or a linear chain)")
    return _series_point(model, H, x, tol, as_generator(rng), m_max, antithetic)


@dataclass(eq=False)
class CorrectorField:
    """Evaluable corrector with accuracy metadata.

    ``linear_exact``: ``U(x) = G x + offset``.  ``series_mc``: values computed point by
    point and memoised by the exact bytes of the query state; each point draws from
    its own stream, so values do not depend on query order.
    """

    mode: str
    dim_in: int
    dim_out: int
    tol: float = 0.0
    G: np.ndarray | None = None
    A: np.ndarray | None = None
    noise_mean: np.ndarray | None = None
    zeta_cov: np.ndarray | None = None
    offset: np.ndarray | None = None
    model: ChainModel | None = None
    H: Observable | None = None
    seed: int = 0
    m_max: int = 2_000_000
    antithetic: bool = True
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.offset is None:
            self.offset = np.zeros(self.dim_out)

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_lock"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def is_exact(self) -> bool:
        return self.mode == "linear_exact"

    def shifted(self, c) -> "CorrectorField":
        """Same corrector plus a constant vector (Poisson solutions are defined up to constants)."""
        c = np.asarray(c, dtype=float).reshape(self.dim_out)
        out = CorrectorField(**{k: v for k, v in self.__dict__.items() if not k.startswith("_")})
        out.offset = self.offset + c
        out._cache = self._cache
        return out

    def _point(self, x: np.ndarray) -> CorrectorValue:
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        val = _series_point(self.model, self.H, x, self.tol, point_stream(self.seed, x), self.m_max, self.antithetic)
        with self._lock:
            self._cache.setdefault(key, val)
        return self._cache[key]

    def evaluate(self, x) -> np.ndarray:
        xb = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, self.dim_in))
        if self.is_exact:
            return xb @ self.G.T + self.offset
        return np.stack([self._point(row.copy()).value for row in xb]) + self.offset

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1 and (self.dim_in > 1 or x.size == 1)
        out = self.evaluate(x)
        return out[0] if single else out

    def tail_bound(self, x) -> np.ndarray:
        xb = np.asarray(x, dtype=float).reshape(-1, self.dim_in)
        if self.is_exact:
            return np.zeros(xb.shape[0])
        return np.array([self._point(np.ascontiguousarray(row)).tail_bound for row in xb])

    def mc_se(self, x) -> np.ndarray:
        xb = np.asarray(x, dtype=float).reshape(-1, self.dim_in)
        if self.is_exact:
            return np.zeros((xb.shape[0], self.dim_out))
        return np.stack([self._point(np.ascontiguousarray(row)).se for row in xb])

    def conditional_mean(self, x) -> np.ndarray:
        """Exact P_x U for the linear construction: G (A x + E xi) + offset."""
        if not self.is_exact:
            raise UnsupportedModelError("exact conditional mean only available for linear_exact correctors")
        xb = np.asarray(x, dtype=float).reshape(-1, self.dim_in)
        return (xb @ self.A.T + self.noise_mean) @ self.G.T + self.offset

    @property
    def truncation_N(self) -> int:
        return max((v.truncation_N for v in self._cache.values()), default=0)

    @property
    def inner_samples_m(self) -> int:
        return max((v.inner_m for v in self._cache.values()), default=0)

    def diagnostics(self) -> list[dict]:
        rows = []
        for key, v in self._cache.items():
            point = np.frombuffer(key, dtype=float)
            rows.append({"point": point.tolist(), "U": (v.value + self.offset).tolist(), "tail_bound": v.tail_bound, "mc_se": v.se.tolist(), "N": v.truncation_N, "m": v.inner_m})
        rows.sort(key=lambda r: r["point"])
        return rows


def exact_corrector_linear(A, C, noise=None) -> CorrectorField:
    """Closed-form corrector ``U(x) = C (I - A)^{-1} x`` for X_n = A X_{n-1} + xi_n and H(x) = C x."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d) or C.shape[1] != d:
        raise ConfigurationError("A must be d x d and C must have d columns")
    radius = float(np.max(np.abs(np.linalg.eigvals(A))))
    if radius >= 1:
        raise InstabilityError(f"spectral radius {radius:.6g} >= 1: eigenvalues of A must lie inside the unit circle")
    G = C @ np.linalg.inv(np.eye(d) - A)
    noise_mean = np.zeros(d) if noise is None else noise.mean()
    zeta_cov = None
    if noise is not None and noise.family == "gaussian":
        zeta_cov = G @ noise.covariance() @ G.T
    return CorrectorField("linear_exact", d, C.shape[0], 0.0, G=G, A=A, noise_mean=noise_mean, zeta_cov=zeta_cov)


def build_corrector(model: ChainModel, H: Observable, mode: str = "auto", tol: float = 1e-2, seed: int = 0, m_max: int = 2_000_000, antithetic: bool = True) -> CorrectorField:
    """Pick the exact construction when the setting allows it, the series otherwise."""
    linear_ok = model.is_linear and isinstance(H, LinearObservable) and not np.any(H.offset)
    if mode == "auto":
        mode = "linear_exact" if linear_ok else "series_mc"
    if mode == "linear_exact":
        if not linear_ok:
            raise UnsupportedModelError("linear_exact needs a linear chain and a linear, zero-offset observable")
        return exact_corrector_linear(model.A, H.C, noise=model.noise)
    if mode != "series_mc":
        raise ConfigurationError(f"unknown corrector mode {mode!r}")
    if model.lipschitz_rho is None:
        raise UnsupportedModelError("series corrector needs a declared Lipschitz rho < 1")
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    return CorrectorField("series_mc", model.dim, H.dim_out, tol, model=model, H=H, seed=seed, m_max=m_max, antithetic=antithetic)


@dataclass
class ResidualReport:
    point: np.ndarray
    residual: np.ndarray
    se: np.ndarray
    tail_bound: float
    passed: bool


def poisson_residual(model: ChainModel, H: Observable, U: CorrectorField, x, m: int, rng) -> ResidualReport:
    """U(x) - P_x U - H(x) with P_x U estimated from ``m`` one-step transitions."""
    if m < 100:
        raise ConfigurationError("poisson_residual needs m >= 100")
    rng = as_generator(rng)
    x = _as_state(model, x)
    xs = np.repeat(x[None, :], m, axis=0)
    nxt = model.drift(xs, model.noise.sample(rng, m))
    values = U.evaluate(nxt)
    pu = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / math.sqrt(m)
    ux = U.evaluate(x[None, :])[0]
    se = np.sqrt(se**2 + U.mc_se(x[None, :])[0] ** 2)
    hx = H(x[None, :])[0]
    residual = ux - pu - hx
    tail = float(U.tail_bound(x[None, :])[0]) + float(U.tail_bound(nxt).max())
    slack = 1e-12 * (1.0 + np.abs(ux) + np.abs(pu) + np.abs(hx))
    passed = bool(np.all(np.abs(residual) <= 3 * se + tail + slack))
    return ResidualReport(x, residual, se, tail, passed)
