"""Run configuration: a strict YAML schema (unknown keys are errors) and its canonical hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NoiseConfig(_Strict):
    family: Literal["gaussian", "laplace", "uniform", "discrete"] = "gaussian"
    dim: int = 1
    scale: float = 1.0
    values: list[float] = []
    probs: list[float] = []


class ModelConfig(_Strict):
    """``kind`` picks the recursion; the remaining fields parameterise it."""

    kind: Literal["linear", "contraction", "sign", "expression"] = "linear"
    A: list[list[float]] | None = None
    theta: float | None = None
    g: str = "tanh"
    m: float | None = None
    expression: str | None = None
    dim: int = 1
    rho: float | None = None
    noise_lipschitz: float = 1.0
    noise: NoiseConfig = NoiseConfig()

    @model_validator(mode="after")
    def _required(self):
        need = {"linear": "A", "contraction": "theta", "sign": "m", "expression": "expression"}[self.kind]
        if getattr(self, need) is None:
            raise ValueError(f"model kind {self.kind!r} needs field {need!r}")
        return self


class ObservableConfig(_Strict):
    kind: Literal["identity", "linear", "map"] = "identity"
    C: list[list[float]] | None = None
    map: str = "tanh"
    center: bool = False
    center_samples: int = 100_000


class PlanConfig(_Strict):
    alpha: float = 0.6
    n_grid: list[int] = [256, 1024, 4096]
    y_grid: list[list[float]] = [[0.5], [1.0]]
    epsilon: float = 0.25
    replicates: int = 1_000_000
    lambda_grid: list[list[float]] = [[1.0]]
    beta: float | None = None
    master_seed: int = 20240101
    block_size: int = 20_000
    x0: list[float] | None = None
    preflight_margin: float = 1.0
    target: Literal["sum", "martingale"] = "sum"

    @field_validator("alpha")
    @classmethod
    def _open_interval(cls, v):
        if not 0.5 < v < 1:
            raise ValueError("alpha must lie strictly inside the open interval (0.5, 1)")
        return v

    @field_validator("replicates")
    @classmethod
    def _enough(cls, v):
        if v < 1000:
            raise ValueError("replicates must be >= 1000")
        return v


class CorrectorConfig(_Strict):
    mode: Literal["auto", "linear_exact", "series_mc"] = "auto"
    tol: float = 1e-2
    inner_m: int = 64
    m_max: int = 2_000_000
    antithetic: bool = True
    probe_states: list[list[float]] = [[-5.0], [-2.0], [0.0], [2.0], [5.0]]
    residual_m: int = 10_000


class RateConfig(_Strict):
    tau: float | None = None
    inner_m: int = 64
    path_length: int = 10_000
    burn_in: int | None = None
    beta_grid: list[float] = [1.0, 0.1, 0.01, 0.001, 0.0001]


class SimulateConfig(_Strict):
    path_length: int = 1000
    invariant_samples: int = 10_000
    contraction_steps: int = 200
    cramer_delta: float = 0.1
    cramer_draws: int = 100_000


class StochasticConfig(_Strict):
    n_grid: list[int] = [64, 256, 1024]
    inner_m: int = 64
    paths: int = 1
    unit_mean_n: int = 64
    unit_mean_R: int = 10_000
    decomposition_paths: int = 1000
    decomposition_n: int = 256


class NegligibilityConfig(_Strict):
    quantity: Literal["state_norm", "corrector_abs", "sum_norm"] = "state_norm"
    alpha: float = 0.75
    n_grid: list[int] = [2, 4, 8, 16, 32]
    eps: float = 1.0
    replicates: int = 100_000
    delta: float = 1.0


class MartingaleConfig(_Strict):
    source: Literal["iid", "corrector"] = "iid"
    noise: NoiseConfig = NoiseConfig()
    epsilon: float = 0.5
    n_grid: list[int] = [64, 128, 256, 512, 1024]
    replicates: int = 1_000_000
    delta: float | None = None  # None: self-consistent delta = epsilon / K
    K: float | None = None
    moment_m: int = 100_000
    two_sided: bool = False


class SignChainConfig(_Strict):
    m: float = 1.2
    delta: float = 1.0
    probe_states: list[float] = [0.0, 1.0, -1.0, 5.0, -5.0, 10.0, -10.0]
    inner_m: int = 100_000
    identity_paths: int = 100
    identity_n: int = 1000


class EstimatorConfig(_Strict):
    theta: float = 0.5
    g: str = "tanh"
    n_grid: list[int] = [256, 1024, 4096, 10_000]
    replicates: int = 10_000
    y_grid: list[float] = [0.5, 1.0]
    epsilon: float = 0.25
    block_size: int = 2_000


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig(A=[[0.5]])
    observable: ObservableConfig = ObservableConfig()
    plan: PlanConfig = PlanConfig()
    corrector: CorrectorConfig = CorrectorConfig()
    rate: RateConfig = RateConfig()
    simulate: SimulateConfig = SimulateConfig()
    stochastic: StochasticConfig = StochasticConfig()
    negligibility: NegligibilityConfig | None = None
    martingale: MartingaleConfig = MartingaleConfig()
    sign_chain: SignChainConfig | None = None
    estimator: EstimatorConfig | None = None
    example: str | None = None
    output_dir: str = "results"
    workers: int | None = Field(default=None, ge=1)

    def canonical(self) -> dict:
        """Fields that affect results; ``workers`` and ``output_dir`` are excluded by design."""
        return self.model_dump(mode="json", exclude={"workers", "output_dir"})

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _validation_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigurationError(_validation_message(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
