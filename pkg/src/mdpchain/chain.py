"""Markov chains driven by i.i.d. shocks, X_n = f(X_{n-1}, xi_n).

States are handled in batches of shape ``(batch, dim)`` so that replicates can be
advanced together.  Norms written ``|.|`` are l1 norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, NumericalBlowupError
from .noise import NoiseSpec
from .rng import as_generator


def l1(v, axis=-1):
    return np.abs(v).sum(axis=axis)


def _identity(x):
    return x


def _one(x):
    return np.ones_like(x)


# bounded-slope maps usable in theta * g(x) + xi; |g'| <= 1 for all of them
SLOPE_ONE_MAPS = {"tanh": np.tanh, "identity": _identity, "sin": np.sin, "one": _one}


@dataclass(frozen=True, eq=False, kw_only=True)
class ChainModel:
    dim: int
    noise: NoiseSpec
    lipschitz_rho: float | None = None
    lipschitz_matrix: np.ndarray | None = None
    noise_lipschitz: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if self.lipschitz_rho is not None and not 0 <= self.lipschitz_rho < 1:
            raise ConfigurationError("declared Lipschitz rho must lie in [0, 1)")

    def drift(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Vectorised recursion map: ``x`` is ``(b, dim)``, ``xi`` is ``(b, noise.dim)``."""
        raise NotImplementedError

    @property
    def is_linear(self) -> bool:
        return False

    def f_at_origin(self) -> np.ndarray:
        return self.drift(np.zeros((1, self.dim)), np.zeros((1, self.noise.dim)))[0]

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "noise": self.noise.to_dict(), "rho": self.lipschitz_rho}


@dataclass(frozen=True, eq=False, kw_only=True)
class LinearChain(ChainModel):
    """X_n = A X_{n-1} + xi_n."""

    A: np.ndarray = None
    dim: int = 0
    name: str = "linear_ar"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ConfigurationError("A must be square")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "dim", A.shape[0])
        if self.noise.dim != A.shape[0]:
            raise ConfigurationError("linear chain needs noise dimension equal to state dimension")
        if self.lipschitz_matrix is None:
            object.__setattr__(self, "lipschitz_matrix", np.abs(A))
        if self.lipschitz_rho is None:
            # induced l1 operator norm: max column sum
            norm = float(np.abs(A).sum(axis=0).max())
            if norm < 1:
                object.__setattr__(self, "lipschitz_rho", norm)
        super().__post_init__()

    def drift(self, x, xi):
        return x @ self.A.T + xi

    @property
    def is_linear(self) -> bool:
        return True

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


@dataclass(frozen=True, eq=False, kw_only=True)
class ContractionChain(ChainModel):
    """X_n = theta * g(X_{n-1}) + xi_n with |g'| <= 1, applied coordinatewise."""

    theta: float = 0.5
    g: str = "tanh"
    dim: int = 1
    name: str = "nonlinear_contraction"

    def __post_init__(self):
        if self.g not in SLOPE_ONE_MAPS:
            raise ConfigurationError(f"unknown map g={self.g!r}; choose from {sorted(SLOPE_ONE_MAPS)}")
        if not abs(self.theta) < 1:
            raise ConfigurationError(f"contraction requires |theta| < 1, got {self.theta}")
        if self.noise.dim != self.dim:
            raise ConfigurationError("contraction chain needs noise dimension equal to state dimension")
        if self.lipschitz_rho is None:
            object.__setattr__(self, "lipschitz_rho", abs(float(self.theta)))
        super().__post_init__()

    def drift(self, x, xi):
        return self.theta * SLOPE_ONE_MAPS[self.g](x) + xi

    @property
    def is_linear(self) -> bool:
        return self.g == "identity"

    @property
    def A(self) -> np.ndarray:
        if not self.is_linear:
            raise AttributeError("A is only defined for g=identity")
        return self.theta * np.eye(self.dim)


@dataclass(frozen=True, eq=False, kw_only=True)
class SignChain(ChainModel):
    """X_n = X_{n-1} - m X_{n-1}/|X_{n-1}| + xi_n, with 0/0 read as 0."""

    m: float = 1.2
    dim: int = 1
    name: str = "sign_chain"

    def __post_init__(self):
        if not self.m > 0:
            raise ConfigurationError("sign chain needs m > 0")
        if self.dim != 1 or self.noise.dim != 1:
            raise ConfigurationError("sign chain is one-dimensional")
        super().__post_init__()

    def drift(self, x, xi):
        # np.sign(0) == 0 implements the 0/0 = 0 convention
        return x - self.m * np.sign(x) + xi


_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in ("tanh", "sin", "cos", "exp", "log", "abs", "sign", "sqrt", "arctan", "minimum", "maximum", "clip", "where")
}
_EXPR_NAMESPACE["pi"] = math.pi


@dataclass(frozen=True, eq=False, kw_only=True)
class ExpressionChain(ChainModel):
    """Recursion given as a numpy expression in ``x`` (shape (b, dim)) and ``xi`` (shape (b, p))."""

    expression: str = "x + xi"
    dim: int = 1
    name: str = "expression"

    def __post_init__(self):
        try:
            compile(self.expression, "<recurrence>", "eval")
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse recurrence expression: {exc}") from None
        super().__post_init__()

    @cached_property
    def _code(self):
        return compile(self.expression, "<recurrence>", "eval")

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_code", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)

    def drift(self, x, xi):
        out = eval(self._code, {"__builtins__": {}}, {**_EXPR_NAMESPACE, "x": x, "xi": xi})
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()


@dataclass(frozen=True, eq=False, kw_only=True)
class FunctionChain(ChainModel):
    """Recursion from an arbitrary vectorised callable ``func(x, xi)``."""

    func: object = None

    def drift(self, x, xi):
        return np.asarray(self.func(x, xi), dtype=float).reshape(x.shape)


# -- operations ------------------------------------------------------------------------


def _as_state(model: ChainModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (model.dim,):
        raise ConfigurationError(f"state has dimension {x.size}, model expects {model.dim}")
    return x


def _as_batch(model: ChainModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if model.dim == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ConfigurationError(f"states must have shape (batch, {model.dim}), got {x.shape}")
    return x


def step(model: ChainModel, x, shock) -> np.ndarray:
    x = _as_state(model, x)
    shock = np.asarray(shock, dtype=float).reshape(-1)
    if shock.shape != (model.noise.dim,):
        raise ConfigurationError(f"shock has dimension {shock.size}, model expects {model.noise.dim}")
    return model.drift(x[None, :], shock[None, :])[0]


@dataclass(frozen=True, eq=False)
class PathSample:
    states: np.ndarray  # (n+1, d), states[0] = X_0
    shocks: np.ndarray  # (n, p), shocks[k] drives states[k] -> states[k+1]
    seed_tag: object = None

    @property
    def n(self) -> int:
        return self.states.shape[0] - 1


def _check_finite(x, k):
    if not np.isfinite(x).all():
        raise NumericalBlowupError(k)


def simulate_path(model: ChainModel, x0, n: int, rng=None, shocks=None, seed_tag=None) -> PathSample:
    """One path of length ``n + 1``; ``shocks`` (shape (n, p)) replaces the random stream when given."""
    if n < 1:
        raise ConfigurationError("path length n must be >= 1")
    x = _as_state(model, x0)[None, :]
    if shocks is None:
        rng = as_generator(rng)
        shocks = model.noise.sample(rng, n)
    else:
        shocks = np.asarray(shocks, dtype=float).reshape(n, model.noise.dim)
    states = np.empty((n + 1, model.dim))
    states[0] = x[0]
    for k in range(n):
        x = model.drift(x, shocks[k : k + 1])
        _check_finite(x, k + 1)
        states[k + 1] = x[0]
    return PathSample(states, shocks, seed_tag)


def simulate_batch(model: ChainModel, x0, n: int, rng, keep=None, callback=None):
    """Advance a batch of independent replicates ``n`` steps.

    ``keep`` is an optional sorted list of step indices whose states are returned
    as an array ``(len(keep), b, d)``; ``callback(k, x_prev, x_new, xi)`` is called
    at every step for on-the-fly statistics.  Returns the final states and the kept ones.
    """
    rng = as_generator(rng)
    x = _as_batch(model, x0).copy()
    b = x.shape[0]
    keep = list(keep or [])
    kept = []
    if 0 in keep:
        kept.append(x.copy())
    for k in range(1, n + 1):
        xi = model.noise.sample(rng, b)
        x_new = model.drift(x, xi)
        _check_finite(x_new, k)
        if callback is not None:
            callback(k, x, x_new, xi)
        x = x_new
        if k in keep:
            kept.append(x.copy())
    return x, (np.stack(kept) if kept else None)


@dataclass
class ContractionReport:
    ratios: np.ndarray
    rho: float | None
    passed: bool | None


def coupled_contraction_check(model: ChainModel, x1, x2, n: int, rng=None, shocks=None, rtol: float = 1e-12) -> ContractionReport:
    """Per-step ratios |X'_k - X''_k| / |X'_{k-1} - X''_{k-1}| for two paths sharing their shocks."""
    if shocks is None:
        shocks = model.noise.sample(as_generator(rng), n)
    a = simulate_path(model, x1, n, shocks=shocks).states
    b = simulate_path(model, x2, n, shocks=shocks).states
    diff = l1(a - b)
    prev, cur = diff[:-1], diff[1:]
    # once the paths agree to rounding level the ratio only measures round-off
    floor = 64 * np.finfo(float).eps * (1.0 + np.maximum(l1(a), l1(b)))
    live = prev > floor[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(live, cur / np.where(live, prev, 1.0), 0.0)
    rho = model.lipschitz_rho
    passed = None if rho is None else bool(np.all(ratios <= rho * (1 + rtol)))
    return ContractionReport(ratios, rho, passed)


def default_burn_in(model: ChainModel, x0) -> int:
    rho = model.lipschitz_rho
    if rho is None:
        return 10_000
    if rho == 0:
        return 1
    x0 = np.asarray(x0, dtype=float)
    return max(1, math.ceil(math.log(1e-8 / (1.0 + float(l1(x0.reshape(-1))))) / math.log(rho)))


def sample_invariant(model: ChainModel, count: int, rng, x0=None, burn_in: int | None = None, stride: int = 1) -> np.ndarray:
    """``count`` states of one path after burn-in, keeping every ``stride``-th state."""
    if count < 1 or stride < 1:
        raise ConfigurationError("count and stride must be >= 1")
    rng = as_generator(rng)
    x0 = np.zeros(model.dim) if x0 is None else _as_state(model, x0)
    burn_in = default_burn_in(model, x0) if burn_in is None else int(burn_in)
    total = burn_in + count * stride
    chunk = 65_536
    out = np.empty((count, model.dim))
    x = x0[None, :]
    filled = 0
    k = 0
    while k < total:
        m = min(chunk, total - k)
        shocks = model.noise.sample(rng, m)
        for j in range(m):
            x = model.drift(x, shocks[j : j + 1])
            k += 1
            if k > burn_in and (k - burn_in) % stride == 0:
                out[filled] = x[0]
                filled += 1
        _check_finite(x, k)
    return out


def mean_abs_envelope(model: ChainModel, x0) -> float:
    """Bound |x0| + (|f(0,0)| + l E|xi|)/(1 - rho) on E|X_n| for contracting chains."""
    rho = model.lipschitz_rho
    if rho is None:
        raise ConfigurationError("envelope needs a declared Lipschitz rho")
    f00 = float(l1(model.f_at_origin()))
    return float(l1(np.asarray(x0, dtype=float).reshape(-1))) + (f00 + model.noise_lipschitz * model.noise.abs_mean()) / (1 - rho)


@dataclass
class CramerEstimate:
    delta: float
    estimate: float
    se: float
    overflow: bool


def cramer_check(noise: NoiseSpec, delta: float, draws: int, rng) -> CramerEstimate:
    """Monte Carlo estimate of E exp(delta |xi_1|)."""
    if delta < 0:
        raise ConfigurationError("delta must be non-negative")
    if delta == 0:
        return CramerEstimate(0.0, 1.0, 0.0, False)
    rng = as_generator(rng)
    chunk = 1_000_000
    sums = np.zeros(2)
    overflow = False
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        arg = delta * l1(noise.sample(rng, m))
        if arg.max(initial=0.0) > 700:
            overflow = True
            break
        w = np.exp(arg)
        sums += (w.sum(), (w * w).sum())
        done += m
    if overflow:
        return CramerEstimate(delta, math.inf, math.inf, True)
    est = sums[0] / draws
    var = max(sums[1] / draws - est * est, 0.0) * draws / max(draws - 1, 1)
    exact = None
    try:
        exact = noise.abs_mgf(delta)
    except (ArithmeticError, ValueError):
        pass
    if exact is not None and not math.isfinite(exact):
        overflow = True
    return CramerEstimate(delta, float(est), math.sqrt(var / draws), overflow or not math.isfinite(est))
