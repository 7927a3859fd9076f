"""Observables H: R^d -> R^p' evaluated on state batches of shape (b, d)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import SLOPE_ONE_MAPS, l1
from .errors import ConfigurationError


@dataclass(frozen=True, eq=False)
class Observable:
    dim_in: int
    dim_out: int
    lipschitz_K: float | None = None

    @property
    def centering_constant(self) -> np.ndarray:
        return np.zeros(self.dim_out)

    def raw(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1 and (self.dim_in > 1 or x.size == 1)
        batch = x.reshape(1, -1) if single else (x.reshape(-1, 1) if x.ndim == 1 else x)
        out = self.raw(batch) - self.centering_constant
        return out[0] if single else out

    @property
    def is_zero(self) -> bool:
        return False


@dataclass(frozen=True, eq=False)
class LinearObservable(Observable):
    """H(x) = C x - offset."""

    C: np.ndarray = None
    offset: np.ndarray = None

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape != (self.dim_out, self.dim_in):
            raise ConfigurationError(f"C must have shape ({self.dim_out}, {self.dim_in}), got {C.shape}")
        object.__setattr__(self, "C", C)
        off = np.zeros(self.dim_out) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(self.dim_out)
        object.__setattr__(self, "offset", off)
        if self.lipschitz_K is None:
            # l1 -> l1 operator norm
            object.__setattr__(self, "lipschitz_K", float(np.abs(C).sum(axis=0).max()))

    @classmethod
    def of(cls, C, offset=None) -> "LinearObservable":
        C = np.atleast_2d(np.asarray(C, dtype=float))
        return cls(C.shape[1], C.shape[0], None, C, offset)

    def raw(self, x):
        return x @ self.C.T - self.offset

    @property
    def is_zero(self) -> bool:
        return not np.any(self.C) and not np.any(self.offset)


def identity_observable(dim: int = 1) -> LinearObservable:
    return LinearObservable.of(np.eye(dim))


def zero_observable(dim_in: int = 1, dim_out: int = 1) -> LinearObservable:
    return LinearObservable.of(np.zeros((dim_out, dim_in)))


@dataclass(frozen=True, eq=False)
class MapObservable(Observable):
    """Coordinatewise named map: ``tanh``, ``sin``, ``square``, ``sign``, ``g_squared:<g>`` or ``constant:<c>``."""

    kind: str = "tanh"

    def raw(self, x):
        kind = self.kind
        if kind == "square":
            return x * x
        if kind == "sign":
            return np.sign(x)
        if kind.startswith("g_squared:"):
            g = SLOPE_ONE_MAPS[kind.split(":", 1)[1]]
            return g(x) ** 2
        if kind.startswith("constant:"):
            return np.full((x.shape[0], self.dim_out), float(kind.split(":", 1)[1]))
        if kind in SLOPE_ONE_MAPS:
            return SLOPE_ONE_MAPS[kind](x)
        raise ConfigurationError(f"unknown observable map {kind!r}")


@dataclass(frozen=True, eq=False)
class FunctionObservable(Observable):
    func: object = None

    def raw(self, x):
        return np.asarray(self.func(x), dtype=float).reshape(x.shape[0], self.dim_out)


@dataclass(frozen=True, eq=False)
class CenteredObservable(Observable):
    """``base(x) - constant``, with the constant estimated under the invariant law."""

    base: Observable = None
    constant: np.ndarray = None
    constant_se: np.ndarray = None

    @property
    def centering_constant(self) -> np.ndarray:
        return self.constant

    def raw(self, x):
        return self.base(x)

    @property
    def is_zero(self) -> bool:
        if isinstance(self.base, MapObservable) and self.base.kind.startswith("constant:"):
            return bool(np.all(self.constant == float(self.base.kind.split(":", 1)[1])))
        return self.base.is_zero and not np.any(self.constant)


def center_observable(H_raw: Observable, mu_samples) -> CenteredObservable:
    """Subtract the sample mean of ``H_raw`` over draws from the invariant law."""
    samples = np.asarray(mu_samples, dtype=float)
    if samples.size == 0:
        raise ConfigurationError("need at least one invariant sample")
    samples = samples.reshape(samples.shape[0], -1) if samples.ndim > 1 else samples.reshape(-1, 1)
    values = H_raw(samples)
    const = values.mean(axis=0)
    if values.shape[0] > 1:
        se = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    else:
        se = np.full(const.shape, np.inf)
    if np.all(values == values[0]):
        # constant observable: centre exactly
        const = values[0].copy()
        se = np.zeros_like(const)
    return CenteredObservable(H_raw.dim_in, H_raw.dim_out, H_raw.lipschitz_K, H_raw, const, se)


def lipschitz_spot_check(H: Observable, rng, pairs: int = 1000, scale: float = 5.0) -> float:
    """Largest observed ratio |H(x') - H(x'')| / |x' - x''| over random pairs."""
    a = rng.uniform(-scale, scale, (pairs, H.dim_in))
    b = rng.uniform(-scale, scale, (pairs, H.dim_in))
    num = l1(H(a) - H(b))
    den = l1(a - b)
    return float(np.max(num / np.maximum(den, 1e-300)))
