"""Covariance B, its Moore-Penrose pseudoinverse and the quadratic rate functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_discrete_lyapunov

from .chain import ChainModel, PathSample, _as_state
from .errors import ConfigurationError, InsufficientDataError
from .poisson import CorrectorField
from .rng import as_generator
from .stats import batch_means_se

RANGE_TOL = 1e-6


def local_covariance(model: ChainModel, U: CorrectorField, x, m: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample covariance of U(f(x, xi)) over ``m`` shocks, with entrywise standard errors."""
    if m < 2:
        raise ConfigurationError("local_covariance needs m >= 2")
    rng = as_generator(rng)
    x = _as_state(model, x)
    nxt = model.drift(np.repeat(x[None, :], m, axis=0), model.noise.sample(rng, m))
    V = U.evaluate(nxt)
    dev = V - V.mean(axis=0)
    cov = dev.T @ dev / (m - 1)
    cov = 0.5 * (cov + cov.T)
    prods = dev[:, :, None] * dev[:, None, :]
    se = prods.std(axis=0, ddof=1) / math.sqrt(m)
    return cov, se


@dataclass
class RateModel:
    B: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    tau: float
    rank: int
    B_pinv: np.ndarray
    B_se: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.B.shape[0]

    def to_dict(self) -> dict:
        return {
            "B": self.B.tolist(),
            "eigvals": self.eigvals.tolist(),
            "eigvecs": self.eigvecs.tolist(),
            "tau": self.tau,
            "rank": self.rank,
            "B_pinv": self.B_pinv.tolist(),
            "B_se": None if self.B_se is None else self.B_se.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RateModel":
        return cls(
            np.asarray(d["B"], dtype=float),
            np.asarray(d["eigvals"], dtype=float),
            np.asarray(d["eigvecs"], dtype=float),
            float(d["tau"]),
            int(d["rank"]),
            np.asarray(d["B_pinv"], dtype=float),
            None if d.get("B_se") is None else np.asarray(d["B_se"], dtype=float),
            dict(d.get("provenance", {})),
        )


def _symmetric(B, what="B") -> np.ndarray:
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] != B.shape[1]:
        raise ConfigurationError(f"{what} must be square")
    norm = np.linalg.norm(B, 2) if B.size else 0.0
    if np.max(np.abs(B - B.T), initial=0.0) > 1e-6 * max(norm, 1e-300):
        raise ConfigurationError(f"{what} is not symmetric (asymmetry beyond 1e-6 * ||{what}||)")
    return 0.5 * (B + B.T)


def _eig_desc(B):
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def default_tau(eigvals) -> float:
    return 1e-8 * float(np.max(np.abs(eigvals), initial=0.0))


def pseudoinverse(B, tau: float | None = None) -> tuple[np.ndarray, int]:
    """B^+ = T diag(1/lambda_i for lambda_i > tau, else 0) T^T for symmetric PSD B."""
    B = _symmetric(B)
    vals, vecs = _eig_desc(B)
    tau = default_tau(vals) if tau is None else float(tau)
    keep = vals > tau
    inv = np.zeros_like(vals)
    inv[keep] = 1.0 / vals[keep]
    Bp = (vecs * inv) @ vecs.T
    return 0.5 * (Bp + Bp.T), int(keep.sum())


def rate_model(B, tau: float | None = None, B_se=None, provenance: dict | None = None) -> RateModel:
    """Eigendecompose a symmetric estimate; clip eigenvalues in [-tau, 0) and reject anything below."""
    B = _symmetric(B)
    vals, vecs = _eig_desc(B)
    tau = default_tau(vals) if tau is None else float(tau)
    if vals.size and vals[-1] < -tau:
        raise ConfigurationError(f"estimated B has eigenvalue {vals[-1]:.3g} < -tau; increase inner_m")
    clipped = np.clip(vals, 0.0, None)
    keep = clipped > tau
    inv = np.zeros_like(clipped)
    inv[keep] = 1.0 / clipped[keep]
    Bp = (vecs * inv) @ vecs.T
    return RateModel(B, clipped, vecs, tau, int(keep.sum()), 0.5 * (Bp + Bp.T), B_se, dict(provenance or {}))


def penrose_residuals(B, Bp) -> dict:
    B = np.asarray(B, dtype=float)
    Bp = np.asarray(Bp, dtype=float)
    BBp = B @ Bp
    BpB = Bp @ B
    return {
        "BBpB": float(np.linalg.norm(BBp @ B - B)),
        "BpBBp": float(np.linalg.norm(BpB @ Bp - Bp)),
        "BBp_sym": float(np.linalg.norm(BBp - BBp.T)),
        "BpB_sym": float(np.linalg.norm(BpB - BpB.T)),
    }


def penrose_ok(B, Bp, rel: float = 1e-8) -> bool:
    """Each condition relative to the norm of the matrix it reproduces (B, B^+, or the projector B B^+)."""
    B = np.asarray(B, dtype=float)
    Bp = np.asarray(Bp, dtype=float)
    res = penrose_residuals(B, Bp)
    proj = max(float(np.linalg.norm(B @ Bp)), 1.0)
    scale = {"BBpB": float(np.linalg.norm(B)), "BpBBp": float(np.linalg.norm(Bp)), "BBp_sym": proj, "BpB_sym": proj}
    return all(res[k] <= rel * scale[k] + 1e-300 for k in res)


def estimate_B(model: ChainModel, U: CorrectorField, path: PathSample, inner_m: int, rng, tau: float | None = None, chunk: int = 2048) -> RateModel:
    """Time average of B(X_{i-1}) along a stationary path."""
    states = path.states[:-1] if isinstance(path, PathSample) else np.asarray(path, dtype=float)
    states = states.reshape(states.shape[0], -1)
    if states.shape[0] < 100:
        raise InsufficientDataError(f"need at least 100 path states, got {states.shape[0]}")
    if inner_m < 2:
        raise ConfigurationError("inner_m must be >= 2")
    rng = as_generator(rng)
    p = U.dim_out
    per_state = np.empty((states.shape[0], p, p))
    for lo in range(0, states.shape[0], chunk):
        block = states[lo : lo + chunk]
        b = block.shape[0]
        xs = np.repeat(block, inner_m, axis=0)
        V = U.evaluate(model.drift(xs, model.noise.sample(rng, b * inner_m))).reshape(b, inner_m, p)
        dev = V - V.mean(axis=1, keepdims=True)
        per_state[lo : lo + b] = np.einsum("bmi,bmj->bij", dev, dev) / (inner_m - 1)
    B = per_state.mean(axis=0)
    B = 0.5 * (B + B.T)
    se = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            se[i, j] = batch_means_se(per_state[:, i, j])[1]
    prov = {"path_length": int(states.shape[0]), "inner_m": int(inner_m), "seed_tag": getattr(path, "seed_tag", None)}
    return rate_model(B, tau=tau, B_se=se, provenance=prov)


def range_residual(rm: RateModel, y) -> float:
    y = np.asarray(y, dtype=float).reshape(rm.dim)
    return float(np.linalg.norm(rm.B_pinv @ (rm.B @ y) - y))


def rate_value(rm: RateModel, y, range_tol: float = RANGE_TOL) -> float:
    """I(y) = y^T B^+ y / 2 on the range of B, +inf off it."""
    y = np.asarray(y, dtype=float).reshape(rm.dim)
    if range_residual(rm, y) > range_tol * (1.0 + np.linalg.norm(y)):
        return math.inf
    return 0.5 * float(y @ rm.B_pinv @ y)


def regularized_rate(B, beta: float, y) -> float:
    """I_beta(y) = y^T (B + beta I)^{-1} y / 2 via a Cholesky solve."""
    if not beta > 0:
        raise ConfigurationError("beta must be positive")
    B = _symmetric(B)
    y = np.asarray(y, dtype=float).reshape(B.shape[0])
    factor = cho_factor(B + beta * np.eye(B.shape[0]))
    return 0.5 * float(y @ cho_solve(factor, y))


@dataclass
class LimitCheck:
    betas: np.ndarray
    values: np.ndarray
    rate: float
    null_norm_sq: float
    verdict: str  # RANGE | DIVERGES | INCONCLUSIVE
    detail: str = ""


def rate_limit_check(B, y, beta_grid, range_tol: float = RANGE_TOL) -> LimitCheck:
    """Classify the beta -> 0 behaviour of I_beta(y)."""
    betas = np.asarray(beta_grid, dtype=float)
    if betas.size < 4 or np.any(betas <= 0) or np.any(np.diff(betas) >= 0):
        raise ConfigurationError("beta_grid must hold at least 4 strictly decreasing positive values")
    rm = rate_model(B)
    y = np.asarray(y, dtype=float).reshape(rm.dim)
    values = np.array([regularized_rate(rm.B, b, y) for b in betas])
    target = rate_value(rm, y, range_tol)
    null = y - rm.B_pinv @ (rm.B @ y)
    null_sq = float(null @ null)
    if math.isfinite(target):
        nondecreasing = bool(np.all(np.diff(values) >= -1e-12 * (1 + np.abs(values[1:]))))
        gap = abs(target - values[-1]) / target if target > 0 else abs(values[-1])
        if nondecreasing and gap < 0.01:
            return LimitCheck(betas, values, target, null_sq, "RANGE", f"relative gap {gap:.3g} at beta={betas[-1]:g}")
        return LimitCheck(betas, values, target, null_sq, "INCONCLUSIVE", f"relative gap {gap:.3g}, monotone={nondecreasing}")
    if null_sq > 0:
        ratios = values[-2:] * betas[-2:] / (0.5 * null_sq)
        if np.all(np.abs(ratios - 1) <= 0.05):
            return LimitCheck(betas, values, target, null_sq, "DIVERGES", f"beta*I_beta/(|null part|^2/2) = {ratios.tolist()}")
        return LimitCheck(betas, values, target, null_sq, "INCONCLUSIVE", f"growth ratios {ratios.tolist()}")
    return LimitCheck(betas, values, target, null_sq, "INCONCLUSIVE", "off-range by tolerance but null component vanishes")


def correlation_series_B(A, C, noise_cov, terms: int = 500) -> np.ndarray:
    """Linear-chain cross-check: stationary covariance series for H(x) = C x, truncated at ``terms``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    S = solve_discrete_lyapunov(A, np.atleast_2d(np.asarray(noise_cov, dtype=float)))
    B = C @ S @ C.T
    An = np.eye(A.shape[0])
    for _ in range(terms):
        An = An @ A
        cross = C @ S @ An.T @ C.T
        B = B + cross + cross.T
    return 0.5 * (B + B.T)
