"""Turn a RunConfig into objects, run one command and persist tables plus obligation verdicts."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .chain import (
    ContractionChain,
    ExpressionChain,
    LinearChain,
    coupled_contraction_check,
    cramer_check,
    default_burn_in,
    sample_invariant,
    simulate_path,
)
from .config import RunConfig, dump_config, load_config, parse_config
from .deviation import (
    ExperimentPlan,
    decomposition,
    empirical_mdp,
    negligibility_probe,
    exponent_limit_check,
    unit_mean_identity,
)
from .errors import ConfigurationError
from .examples import (
    describe,
    estimator_experiment,
    linear_chain_envelope,
    lyapunov_drift_check,
    make_sign_chain,
    mdp_condition_check,
    sign_chain_envelope,
    sign_reduction_identity,
)
from .martingale import (
    MartingaleSpec,
    conditional_moment_bound,
    empirical_tail_dominance,
    gaussian_tail_dominance,
    self_consistent_K,
)
from .noise import NoiseSpec
from .observables import LinearObservable, MapObservable, center_observable, identity_observable
from .poisson import build_corrector, poisson_residual
from .rate import estimate_B, penrose_ok, penrose_residuals, range_residual, rate_limit_check, rate_model, rate_value
from .rng import stream

log = logging.getLogger("mdpchain")


@dataclass
class Obligation:
    name: str
    passed: bool | None  # None: inconclusive, reported but not a failure
    detail: str = ""

    @property
    def status(self) -> str:
        return {True: "PASS", False: "FAIL", None: "INCONCLUSIVE"}[self.passed]


@dataclass
class RunResult:
    command: str
    tables: dict = field(default_factory=dict)  # name -> list of row dicts
    obligations: list = field(default_factory=list)

    def add(self, name, passed, detail=""):
        self.obligations.append(Obligation(name, None if passed is None else bool(passed), detail))

    @property
    def ok(self) -> bool:
        return all(o.passed is not False for o in self.obligations)


# -- building objects -------------------------------------------------------------------


def build_noise(nc) -> NoiseSpec:
    return NoiseSpec(nc.family, dim=nc.dim, scale=nc.scale, values=tuple(nc.values), probs=tuple(nc.probs))


def build_model(cfg: RunConfig):
    mc = cfg.model
    noise = build_noise(mc.noise)
    if mc.kind == "linear":
        return LinearChain(A=np.asarray(mc.A, dtype=float), noise=noise, noise_lipschitz=mc.noise_lipschitz)
    if mc.kind == "contraction":
        return ContractionChain(theta=mc.theta, g=mc.g, noise=noise, dim=mc.dim, noise_lipschitz=mc.noise_lipschitz)
    if mc.kind == "sign":
        return make_sign_chain(mc.m, noise)
    return ExpressionChain(expression=mc.expression, dim=mc.dim, noise=noise, lipschitz_rho=mc.rho, noise_lipschitz=mc.noise_lipschitz)


def build_observable(cfg: RunConfig, model):
    oc = cfg.observable
    if oc.kind == "identity":
        H = identity_observable(model.dim)
    elif oc.kind == "linear":
        if oc.C is None:
            raise ConfigurationError("observable kind 'linear' needs C")
        H = LinearObservable.of(oc.C)
    else:
        H = MapObservable(model.dim, model.dim, 1.0, oc.map)
    if oc.center:
        samples = sample_invariant(model, oc.center_samples, stream(cfg.plan.master_seed, "center"), x0=cfg.plan.x0)
        H = center_observable(H, samples)
    return H


def build_U(cfg: RunConfig, model, H):
    cc = cfg.corrector
    return build_corrector(model, H, cc.mode, cc.tol, cfg.plan.master_seed, cc.m_max, cc.antithetic)


def build_plan(cfg: RunConfig) -> ExperimentPlan:
    p = cfg.plan
    return ExperimentPlan(
        p.alpha, tuple(p.n_grid), tuple(tuple(y) for y in p.y_grid), p.epsilon, p.replicates,
        tuple(tuple(l) for l in p.lambda_grid), p.beta, p.master_seed, p.block_size,
        None if p.x0 is None else tuple(p.x0), p.preflight_margin, p.target,
    )


def _x0(cfg, model):
    return np.zeros(model.dim) if cfg.plan.x0 is None else np.asarray(cfg.plan.x0, dtype=float)


def build_rate(cfg: RunConfig, model, H, U, prefer_exact: bool = True):
    """Closed-form B for the exact linear-Gaussian corrector, otherwise a path estimate."""
    if prefer_exact and U.is_exact and U.zeta_cov is not None:
        return rate_model(U.zeta_cov, cfg.rate.tau, provenance={"source": "exact"})
    x0 = _x0(cfg, model)
    burn = cfg.rate.burn_in if cfg.rate.burn_in is not None else default_burn_in(model, x0)
    start = sample_invariant(model, 1, stream(cfg.plan.master_seed, "rate-burn"), x0=x0, burn_in=burn)[0]
    path = simulate_path(model, start, cfg.rate.path_length, stream(cfg.plan.master_seed, "rate-path"), seed_tag="rate-path")
    rm = estimate_B(model, U, path, cfg.rate.inner_m, stream(cfg.plan.master_seed, "rate-inner"), tau=cfg.rate.tau)
    rm.provenance["source"] = "estimated"
    return rm


# -- commands ---------------------------------------------------------------------------


def run_simulate(cfg: RunConfig) -> RunResult:
    res = RunResult("simulate")
    model = build_model(cfg)
    seed = cfg.plan.master_seed
    sc = cfg.simulate
    x0 = _x0(cfg, model)
    path = simulate_path(model, x0, sc.path_length, stream(seed, "simulate-path"))
    res.tables["path"] = [
        {"k": k, **{f"x{i}": float(v) for i, v in enumerate(s)}, **{f"xi{i}": (float(path.shocks[k - 1][i]) if k else math.nan) for i in range(model.noise.dim)}}
        for k, s in enumerate(path.states)
    ]
    inv = sample_invariant(model, sc.invariant_samples, stream(seed, "simulate-invariant"), x0=x0)
    res.tables["invariant"] = [{f"x{i}": float(v) for i, v in enumerate(s)} for s in inv]
    summary = {"mean_" + str(i): float(inv[:, i].mean()) for i in range(model.dim)}
    summary.update({"var_" + str(i): float(inv[:, i].var(ddof=1)) for i in range(model.dim)})
    res.tables["invariant_summary"] = [summary]
    if model.lipschitz_rho is not None:
        rep = coupled_contraction_check(model, x0, x0 + 5.0, sc.contraction_steps, stream(seed, "simulate-contraction"))
        res.add("contraction", rep.passed, f"max ratio {float(rep.ratios.max()):.6g} vs rho {rep.rho:.6g}")
    else:
        res.add("contraction", None, "no Lipschitz rho declared")
    ce = cramer_check(model.noise, sc.cramer_delta, sc.cramer_draws, stream(seed, "simulate-cramer"))
    res.tables["cramer"] = [{"delta": ce.delta, "estimate": ce.estimate, "se": ce.se, "overflow": ce.overflow, "analytic": model.noise.abs_mgf(ce.delta)}]
    res.add("cramer_moment", not ce.overflow, f"E exp(delta|xi|) ~ {ce.estimate:.6g} at delta={ce.delta:g}")
    return res


def run_poisson(cfg: RunConfig) -> RunResult:
    res = RunResult("poisson")
    model = build_model(cfg)
    H = build_observable(cfg, model)
    U = build_U(cfg, model, H)
    seed = cfg.plan.master_seed
    rows = []
    for j, x in enumerate(cfg.corrector.probe_states):
        x = np.asarray(x, dtype=float)
        rep = poisson_residual(model, H, U, x, cfg.corrector.residual_m, stream(seed, "poisson-residual", j))
        row = {"point": x.tolist(), "U": U(x).tolist(), "residual": rep.residual.tolist(), "se": rep.se.tolist(), "tail_bound": rep.tail_bound, "passed": rep.passed}
        if not U.is_exact:
            cv = U._point(np.ascontiguousarray(x))
            row.update(N=cv.truncation_N, m=cv.inner_m, mc_se=cv.se.tolist())
        rows.append(row)
    res.tables["corrector"] = rows
    res.add("poisson_residual", all(r["passed"] for r in rows), f"{sum(r['passed'] for r in rows)}/{len(rows)} probe states within 3 se + tail")
    return res


def run_rate(cfg: RunConfig) -> RunResult:
    res = RunResult("rate")
    model = build_model(cfg)
    H = build_observable(cfg, model)
    U = build_U(cfg, model, H)
    rm = build_rate(cfg, model, H, U, prefer_exact=False)
    res.tables["rate_model"] = [rm.to_dict()]
    pen = penrose_residuals(rm.B, rm.B_pinv)
    res.add("penrose", penrose_ok(rm.B, rm.B_pinv), json.dumps(pen))
    rows = []
    for y in cfg.plan.y_grid:
        lc = rate_limit_check(rm.B, y, cfg.rate.beta_grid)
        rows.append({"y": list(y), "rate": rate_value(rm, y), "range_residual": range_residual(rm, y), "limit_verdict": lc.verdict, "detail": lc.detail})
    res.tables["rate"] = rows
    if U.is_exact and U.zeta_cov is not None:
        exact = U.zeta_cov
        rel = float(np.abs(rm.B - exact).max() / max(np.abs(exact).max(), 1e-300))
        res.add("covariance_vs_exact", rel <= 0.05, f"max relative deviation {rel:.4g}")
    return res


def _decomposition_rows(cfg, model, H, U, alpha):
    sc = cfg.stochastic
    worst = 0.0
    bound = 0.0
    for r in range(sc.decomposition_paths):
        path = simulate_path(model, _x0(cfg, model), sc.decomposition_n, stream(cfg.plan.master_seed, "decomposition", r))
        d = decomposition(model, H, U, path, alpha, sc.inner_m, stream(cfg.plan.master_seed, "decomposition-inner", r))
        worst = max(worst, float(np.abs(d.residual).max()))
        bound = max(bound, d.residual_bound)
    return worst, bound


def run_deviate(cfg: RunConfig, workers=None) -> RunResult:
    res = RunResult("deviate")
    model = build_model(cfg)
    H = build_observable(cfg, model)
    U = build_U(cfg, model, H)
    plan = build_plan(cfg)
    rm = build_rate(cfg, model, H, U)
    t = time.perf_counter()
    est = empirical_mdp(plan, model, H, rm, U, workers=workers)
    log.info("empirical_mdp: %d replicates in %.1fs", plan.replicates, time.perf_counter() - t)
    res.tables["deviation"] = [c.as_row() for c in est.cells]
    res.tables["plotdata"] = [{"n": c.n, "y": list(c.y), "rate_hat": c.rate_hat, "rate_theory": c.rate_theory} for c in est.cells]
    band = est.band_check()
    trend = est.trend_check()
    res.add("mdp_band", all(band.values()) if band else None, f"r_hat in [0.6 I, 1.4 I] at n={plan.n_grid[-1]}: {band}")
    res.add("mdp_trend", all(trend.values()), f"gap nonincreasing up to CI overlap: {trend}")
    sc = cfg.stochastic
    rows, verdicts = exponent_limit_check(model, U, rm, plan.lambda_grid, sc.n_grid, plan.alpha, plan.master_seed, sc.inner_m, sc.paths, plan.x0)
    res.tables["stochastic_exponential"] = [r.__dict__ | {"lam": list(r.lam)} for r in rows]
    res.add("exponent_limit_trend", all(verdicts.values()), f"{verdicts}")
    if sc.decomposition_paths:
        worst, bound = _decomposition_rows(cfg, model, H, U, plan.alpha)
        limit = 1e-10 if U.is_exact else bound
        res.add("decomposition", worst <= limit, f"max |residual| {worst:.3g} over {sc.decomposition_paths} paths (limit {limit:.3g})")
    if U.is_exact and U.zeta_cov is not None and sc.unit_mean_R:
        lam = plan.lambda_grid[0]
        mean, se = unit_mean_identity(model, U, sc.unit_mean_n, lam, sc.unit_mean_R, stream(plan.master_seed, "unit-mean"), plan.x0)
        res.tables["unit_mean"] = [{"n": sc.unit_mean_n, "lam": list(lam), "mean": mean, "se": se}]
        res.add("unit_mean", abs(mean - 1) <= 3 * se, f"mean {mean:.6g} +- {se:.3g}")
    nc = cfg.negligibility
    if nc is not None:
        env = None
        if nc.quantity == "state_norm" and isinstance(model, LinearChain):
            env = linear_chain_envelope(model.A, model.noise, nc.delta, nc.alpha, nc.eps, _x0(cfg, model))
        probe = negligibility_probe(model, nc.quantity, nc.alpha, nc.n_grid, nc.eps, nc.replicates, plan.master_seed, U=U, H=H, x0=plan.x0, block_size=plan.block_size, workers=workers, envelope=env)
        res.tables["negligibility"] = [r.__dict__ for r in probe.rows]
        res.add("negligibility", probe.passed, f"{nc.quantity}: normalized log p {[r.normalized_log_p for r in probe.rows]}")
        if env is not None:
            res.add("negligibility_envelope", probe.envelope_dominates, "Chernoff envelope above the table")
    return res


def martingale_K(cfg: RunConfig, spec: MartingaleSpec, model=None) -> tuple[float, dict]:
    """K from the declared value, exact moments (i.i.d. differences) or common-random-number estimates."""
    mc = cfg.martingale
    if mc.K is not None:
        return mc.K, {"K_source": "declared"}
    if spec.is_iid:
        second = spec.noise.variance()
        third = lambda d: spec.noise.abs_moment(3, d)
        src = "exact moments"
    else:
        states = cfg.corrector.probe_states
        seed = cfg.plan.master_seed

        def est(d):
            return conditional_moment_bound(spec, states, mc.moment_m, stream(seed, "moments"), delta=d)

        second = float(est(1e-12).second.max())
        third = lambda d: float(est(d).third_exp.max())
        src = "estimated moments"
    if mc.delta is not None:
        return max(second, third(mc.delta)), {"K_source": src, "delta": mc.delta}
    K = self_consistent_K(second, third, mc.epsilon)
    return K, {"K_source": src, "delta": mc.epsilon / K}


def run_martingale(cfg: RunConfig, workers=None) -> RunResult:
    res = RunResult("martingale")
    mc = cfg.martingale
    if mc.source == "iid":
        spec = MartingaleSpec(noise=build_noise(mc.noise))
    else:
        model = build_model(cfg)
        H = build_observable(cfg, model)
        U = build_U(cfg, model, H)
        spec = MartingaleSpec(model=model, U=U, x0=cfg.plan.x0)
    K, meta = martingale_K(cfg, spec)
    dom = empirical_tail_dominance(spec, mc.epsilon, mc.n_grid, mc.replicates, cfg.plan.master_seed, K=K, two_sided=mc.two_sided, block_size=cfg.plan.block_size, workers=workers)
    res.tables["dominance"] = [r.as_row() for r in dom.rows]
    res.add("tail_dominance", dom.dominance is not False, f"K={K:.6g} ({meta['K_source']}); inconclusive zero-hit cells at n={dom.inconclusive}")
    if spec.is_iid and spec.noise.family == "gaussian":
        rows = gaussian_tail_dominance(spec.noise.scale, mc.epsilon, mc.n_grid, K, mc.two_sided)
        res.tables["gaussian_oracle"] = rows
        res.add("gaussian_oracle_dominance", all(r["dominance"] for r in rows), "exact Gaussian tail below the bound")
    return res


def run_sign_chain(cfg: RunConfig, workers=None) -> RunResult:
    res = RunResult("sign_chain")
    sc = cfg.sign_chain
    if sc is None:
        raise ConfigurationError("config needs a sign_chain section")
    noise = build_noise(cfg.model.noise)
    seed = cfg.plan.master_seed
    cond = mdp_condition_check(sc.m, noise, sc.delta)
    res.tables["condition"] = [cond.__dict__]
    res.add("mdp_condition", cond.holds, f"m={sc.m} vs threshold {cond.threshold:.6g}")
    rows, ok = lyapunov_drift_check(sc.m, noise, sc.delta, sc.probe_states, sc.inner_m, stream(seed, "lyapunov"))
    res.tables["lyapunov"] = [r.__dict__ for r in rows]
    res.add("lyapunov_drift", ok, f"{sum(r.passed for r in rows)}/{len(rows)} probe states")
    model = make_sign_chain(sc.m, noise)
    worst = 0.0
    for r in range(sc.identity_paths):
        path = simulate_path(model, _x0(cfg, model), sc.identity_n, stream(seed, "sign-identity", r))
        worst = max(worst, sign_reduction_identity(model, path, cfg.plan.alpha).residual)
    res.add("sign_reduction", worst <= 1e-10, f"max residual {worst:.3g} over {sc.identity_paths} paths")
    nc = cfg.negligibility
    if nc is not None:
        env = sign_chain_envelope(sc.m, noise, sc.delta, nc.alpha, nc.eps, float(_x0(cfg, model)[0]))
        probe = negligibility_probe(model, "state_norm", nc.alpha, nc.n_grid, nc.eps, nc.replicates, seed, x0=cfg.plan.x0, block_size=cfg.plan.block_size, workers=workers, envelope=env)
        res.tables["negligibility"] = [r.__dict__ for r in probe.rows]
        res.add("state_negligibility", probe.passed, f"normalized log p {[r.normalized_log_p for r in probe.rows]}")
        res.add("negligibility_envelope", probe.envelope_dominates, "Chernoff envelope above the table")
    return res


def run_estimator(cfg: RunConfig, workers=None) -> RunResult:
    res = RunResult("estimator")
    ec = cfg.estimator
    if ec is None:
        raise ConfigurationError("config needs an estimator section")
    rep = estimator_experiment(ec.theta, ec.g, ec.n_grid, cfg.plan.alpha, ec.replicates, cfg.plan.master_seed, ec.y_grid, ec.epsilon, build_noise(cfg.model.noise), block_size=ec.block_size, workers=workers)
    res.tables["estimator_cells"] = [c.__dict__ for c in rep.cells]
    res.tables["estimator_clt"] = [{"n": n, "variance": v, "variance_se": s, "inverse_B_hat": 1 / rep.B_hat, "ratio": rep.clt_ratio(n)} for n, (v, s) in rep.clt_variance.items()]
    n = rep.n_grid[-1]
    res.add("estimator_identity", rep.identity_residual <= 1e-10, f"max residual {rep.identity_residual:.3g}")
    res.add("clt_variance", abs(rep.clt_ratio(n) - 1) <= 0.10, f"variance * B_hat = {rep.clt_ratio(n):.4f} at n={n} (B_hat={rep.B_hat:.5g})")
    band = rep.band_check()
    res.add("estimator_mdp_band", all(band.values()) if band else None, f"r_hat in [0.6 I, 1.4 I], I = y^2/(2 B_hat), at n={n}: {band}")
    return res


COMMANDS = {
    "simulate": run_simulate,
    "poisson": run_poisson,
    "rate": run_rate,
    "deviate": run_deviate,
    "martingale": run_martingale,
}

EXAMPLE_STEPS = {
    "linear_ar": ("poisson", "rate", "deviate", "martingale"),
    "nonlinear_contraction": ("simulate", "poisson", "deviate"),
    "sign_chain": ("sign_chain",),
    "estimator": ("estimator",),
}


def example_config(name: str, plan_path=None) -> RunConfig:
    describe(name)
    if plan_path is not None:
        return load_config(plan_path)
    text = resources.files("mdpchain").joinpath("plans", f"{name}.yaml").read_text()
    return parse_config(yaml.safe_load(text))


def run_step(step: str, cfg: RunConfig, workers=None) -> RunResult:
    if step in ("deviate", "martingale", "sign_chain", "estimator"):
        fn = {"deviate": run_deviate, "martingale": run_martingale, "sign_chain": run_sign_chain, "estimator": run_estimator}[step]
        return fn(cfg, workers=workers)
    return COMMANDS[step](cfg)


# -- persistence ------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return json.dumps(_jsonable(v))
    if v is None:
        return ""
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


def _flatten(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if k == "y" and isinstance(v, (list, tuple)):
            for i, x in enumerate(v):
                out[f"y{i}"] = x
        else:
            out[k] = v
    return out


def provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "master_seed": cfg.plan.master_seed, "version": __version__}


def write_table(outdir: Path, name: str, rows: list, prov: dict) -> None:
    rows = [_flatten(r) | prov for r in rows]
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(outdir / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in cols])
    (outdir / f"{name}.json").write_text(json.dumps(_jsonable(rows), indent=1) + "\n")


def write_result(res: RunResult, cfg: RunConfig, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg)
    for name, rows in res.tables.items():
        write_table(outdir, name, rows, prov)
    (outdir / "obligations.json").write_text(
        json.dumps({"command": res.command, **prov, "obligations": [o.__dict__ | {"status": o.status} for o in res.obligations]}, indent=1) + "\n"
    )
    (outdir / "config.yaml").write_text(dump_config(cfg))
    return outdir


# -- report -----------------------------------------------------------------------------


def collect_obligations(result_dir) -> list[tuple[str, dict]]:
    root = Path(result_dir)
    found = []
    for f in sorted(root.rglob("obligations.json")):
        data = json.loads(f.read_text())
        rel = str(f.parent.relative_to(root)) or "."
        for o in data["obligations"]:
            found.append((rel, o))
    return found


def build_report(result_dir) -> tuple[str, bool]:
    """Markdown summary with one PASS/FAIL/INCONCLUSIVE line per obligation, plus merged plot data."""
    root = Path(result_dir)
    if not root.is_dir():
        raise ConfigurationError(f"no results: {root} is not a directory")
    found = collect_obligations(root)
    if not found:
        raise ConfigurationError(f"no results: {root} holds no obligations.json files")
    lines = ["# mdpchain report", "", "| run | obligation | status | detail |", "|---|---|---|---|"]
    for rel, o in found:
        detail = str(o.get("detail", "")).replace("|", "/")
        lines.append(f"| {rel} | {o['name']} | {o['status']} | {detail} |")
    ok = all(o["status"] != "FAIL" for _, o in found)
    lines += ["", f"overall: {'PASS' if ok else 'FAIL'}", ""]
    plot_rows = []
    for f in sorted(root.rglob("plotdata.json")):
        for r in json.loads(f.read_text()):
            plot_rows.append({"run": str(f.parent.relative_to(root)) or ".", **r})
    text = "\n".join(lines)
    (root / "report.md").write_text(text)
    if plot_rows:
        (root / "report_plotdata.json").write_text(json.dumps(plot_rows, indent=1) + "\n")
    return text, ok
