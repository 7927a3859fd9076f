"""Small estimators shared by the experiment modules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

Z95 = float(norm.ppf(0.975))


def wilson_interval(hits: int, total: int, z: float = Z95) -> tuple[float, float]:
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= hits <= total:
        raise ValueError("hits must lie in [0, total]")
    p = hits / total
    denom = 1.0 + z * z / total
    centre = (p + z * z / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    lo = max(0.0, centre - half)
    hi = min(1.0, centre + half)
    if hits == 0:
        lo = 0.0
    if hits == total:
        hi = 1.0
    return lo, hi


def rule_of_three(total: int) -> float:
    """95% upper bound on a probability estimated as zero from ``total`` trials."""
    return min(1.0, 3.0 / total)


def mean_se(samples, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(samples, dtype=float)
    m = x.shape[axis]
    mean = x.mean(axis=axis)
    if m < 2:
        return mean, np.full_like(mean, np.inf)
    return mean, x.std(axis=axis, ddof=1) / math.sqrt(m)


def batch_means_se(series, n_batches: int = 30) -> tuple[float, float]:
    """Mean and batch-means standard error of a (possibly autocorrelated) scalar series."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 2 * n_batches:
        return mean_se(x)
    size = x.size // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(x.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


@dataclass
class RunningMoments:
    """Count/mean/M2 accumulator whose merge is exact in a fixed merge order."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values) -> "RunningMoments":
        x = np.asarray(values, dtype=float).ravel()
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        return cls(int(x.size), mu, float(((x - mu) ** 2).sum()))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return RunningMoments(self.count, self.mean, self.m2)
        if self.count == 0:
            return RunningMoments(other.count, other.mean, other.m2)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return RunningMoments(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else math.nan

    @property
    def se(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else math.inf
