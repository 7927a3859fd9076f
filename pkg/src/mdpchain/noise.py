"""Driving noise for the recursions: i.i.d. vectors with independent coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gamma as gamma_fn

from .errors import ConfigurationError

FAMILIES = ("gaussian", "laplace", "uniform", "discrete")


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Distribution of the shock vector ``xi``.

    ``scale`` is the standard deviation (gaussian), the Laplace scale ``b`` or the
    half-width of a uniform law on ``[-scale, scale]``.  ``discrete`` draws each
    coordinate from ``values`` with probabilities ``probs``.  ``cramer_delta`` is the
    declared exponent for which ``E exp(delta |xi|)`` is claimed finite.
    """

    family: str = "gaussian"
    dim: int = 1
    scale: float = 1.0
    values: tuple = field(default=())
    probs: tuple = field(default=())
    cramer_delta: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if int(self.dim) < 1:
            raise ConfigurationError("noise dimension must be >= 1")
        object.__setattr__(self, "dim", int(self.dim))
        if self.family == "discrete":
            values = tuple(float(v) for v in self.values)
            probs = tuple(float(p) for p in self.probs) if self.probs else tuple(1.0 / len(values) for _ in values)
            if not values or len(values) != len(probs):
                raise ConfigurationError("discrete noise needs matching non-empty values and probs")
            if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, rel_tol=0, abs_tol=1e-12):
                raise ConfigurationError("discrete probabilities must be non-negative and sum to 1")
            object.__setattr__(self, "values", values)
            object.__setattr__(self, "probs", probs)
        elif not self.scale >= 0:
            raise ConfigurationError("noise scale must be non-negative")
        if self.cramer_delta is not None and not self.cramer_delta > 0:
            raise ConfigurationError("cramer_delta must be positive")

    @classmethod
    def point_mass(cls, dim: int = 1) -> "NoiseSpec":
        return cls("discrete", dim=dim, values=(0.0,), probs=(1.0,))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        shape = (int(size), self.dim)
        if self.family == "gaussian":
            return rng.standard_normal(shape) * self.scale
        if self.family == "laplace":
            return rng.laplace(0.0, self.scale, shape) if self.scale > 0 else np.zeros(shape)
        if self.family == "uniform":
            return rng.uniform(-self.scale, self.scale, shape)
        if len(self.values) == 1:
            return np.full(shape, self.values[0])
        idx = rng.choice(len(self.values), size=shape, p=self.probs)
        return np.asarray(self.values)[idx]

    # -- moments of a single coordinate -------------------------------------------------

    @property
    def is_degenerate(self) -> bool:
        if self.family == "discrete":
            return len(set(v for v, p in zip(self.values, self.probs) if p > 0)) == 1
        return self.scale == 0

    @property
    def is_symmetric(self) -> bool:
        if self.family != "discrete":
            return True
        law = {}
        for v, p in zip(self.values, self.probs):
            law[v] = law.get(v, 0.0) + p
        return all(math.isclose(p, law.get(-v, 0.0), abs_tol=1e-15) for v, p in law.items())

    def mean(self) -> np.ndarray:
        if self.family == "discrete":
            m = sum(v * p for v, p in zip(self.values, self.probs))
        else:
            m = 0.0
        return np.full(self.dim, m)

    def variance(self) -> float:
        if self.family == "gaussian":
            return self.scale**2
        if self.family == "laplace":
            return 2.0 * self.scale**2
        if self.family == "uniform":
            return self.scale**2 / 3.0
        m = sum(v * p for v, p in zip(self.values, self.probs))
        return sum(p * (v - m) ** 2 for v, p in zip(self.values, self.probs))

    def covariance(self) -> np.ndarray:
        return self.variance() * np.eye(self.dim)

    def abs_moment(self, power: float = 0.0, delta: float = 0.0) -> float:
        """``E |xi_1|^power exp(delta |xi_1|)`` for one coordinate (``inf`` outside the Cramer region)."""
        if delta < 0 or power < 0:
            raise ValueError("power and delta must be non-negative")
        if self.family == "discrete":
            return float(sum(p * abs(v) ** power * math.exp(delta * abs(v)) for v, p in zip(self.values, self.probs)))
        s = self.scale
        if s == 0:
            return 1.0 if power == 0 else 0.0
        if self.family == "laplace":
            rate = 1.0 / s - delta
            if rate <= 0:
                return math.inf
            return float(gamma_fn(power + 1.0) / (s * rate ** (power + 1.0)))
        if self.family == "uniform":
            val, _ = integrate.quad(lambda z: z**power * math.exp(delta * z) / s, 0.0, s)
            return float(val)

        def integrand(z):
            return 2.0 * z**power * math.exp(delta * z - 0.5 * (z / s) ** 2) / (s * math.sqrt(2 * math.pi))

        val, _ = integrate.quad(integrand, 0.0, math.inf, limit=200)
        return float(val)

    def abs_mgf(self, delta: float) -> float:
        """``E exp(delta |xi|)`` with ``|.|`` the l1 norm of the shock vector."""
        one = self.abs_moment(0.0, delta)
        return one**self.dim

    def abs_mean(self) -> float:
        """``E |xi|`` in the l1 norm."""
        return self.dim * self.abs_moment(1.0, 0.0)

    def to_dict(self) -> dict:
        out = {"family": self.family, "dim": self.dim}
        if self.family == "discrete":
            out.update(values=list(self.values), probs=list(self.probs))
        else:
            out["scale"] = self.scale
        if self.cramer_delta is not None:
            out["cramer_delta"] = self.cramer_delta
        return out
