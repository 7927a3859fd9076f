"""Command line entry point.

Exit codes: 0 when every obligation passes, 1 when one fails, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import __version__
from .config import load_config
from .errors import ConfigurationError, InstabilityError, PlanInfeasibleError
from .examples import EXAMPLES
from .runner import EXAMPLE_STEPS, build_report, example_config, run_step, write_result

log = logging.getLogger("mdpchain")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdpchain", description="Moderate-deviation experiments for ergodic Markov chains.")
    p.add_argument("--version", action="version", version=f"mdpchain {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("simulate", "paths, invariant samples, contraction and Cramer checks"),
        ("poisson", "corrector diagnostics and Poisson residuals"),
        ("rate", "covariance B, pseudoinverse and limit checks"),
        ("deviate", "ball probabilities, stochastic exponential and negligibility tables"),
        ("martingale", "exponential tail bound against simulated martingales"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="YAML run configuration")
        sp.add_argument("--output-dir", "-o", help="override output_dir from the config")
        sp.add_argument("--workers", type=int, help="worker processes (default: config, then MDPCHAIN_WORKERS, then 1)")
    ex = sub.add_parser("example", help="run a registered example with its default plan")
    ex.add_argument("name", nargs="?", choices=sorted(EXAMPLES))
    ex.add_argument("--list", action="store_true", help="list registered examples")
    ex.add_argument("--plan", help="replace the shipped plan with this YAML file")
    ex.add_argument("--output-dir", "-o")
    ex.add_argument("--workers", type=int)
    rp = sub.add_parser("report", help="summarise a result directory")
    rp.add_argument("result_dir")
    return p


def _diagnostic(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def _run(steps, cfg, outdir, workers) -> int:
    ok = True
    for step in steps:
        t = time.perf_counter()
        res = run_step(step, cfg, workers=workers)
        where = write_result(res, cfg, outdir if len(steps) == 1 else f"{outdir}/{step}")
        log.info("%s finished in %.1fs -> %s", step, time.perf_counter() - t, where)
        for o in res.obligations:
            print(f"{o.status:12s} {step}.{o.name}: {o.detail}")
        ok &= res.ok
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            text, ok = build_report(args.result_dir)
            print(text)
            return EXIT_OK if ok else EXIT_FAIL
        if args.command == "example":
            if args.list or args.name is None:
                for name, d in sorted(EXAMPLES.items()):
                    print(f"{name:24s} {d.summary}")
                return EXIT_OK
            cfg = example_config(args.name, args.plan)
            outdir = args.output_dir or f"{cfg.output_dir}/{args.name}"
            workers = args.workers if args.workers is not None else cfg.workers
            return _run(EXAMPLE_STEPS[args.name], cfg, outdir, workers)
        cfg = load_config(args.config)
        outdir = args.output_dir or cfg.output_dir
        workers = args.workers if args.workers is not None else cfg.workers
        return _run((args.command,), cfg, outdir, workers)
    except PlanInfeasibleError as exc:
        _diagnostic("plan_infeasible", str(exc), feasible_cells=[[n, list(y)] for n, y in exc.feasible_cells])
        return EXIT_CONFIG
    except (ConfigurationError, InstabilityError) as exc:
        _diagnostic("configuration", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
