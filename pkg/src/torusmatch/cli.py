"""Command line entry point: one subcommand per experiment.

Exit codes: 0 pass, 1 statistical-test failure, 2 configuration error,
3 solver/convergence failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as ex
from .ansatz import InvalidConfiguration
from .torus import InvalidInput
from .transport import APPROX, EXACT, ConvergenceError

EXIT_PASS, EXIT_STAT, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

# per-subcommand defaults: the acceptance-scale configuration of each experiment
DEFAULTS = {
    "scaling": dict(n_list="64,256,1024", replicates=200, replicates_at=["1024:50"]),
    "covariance": dict(n_list="50", replicates=20000, t=0.01, y="0.1,0"),
    "energy-identity": dict(n_list="32", replicates=10000),
    "trajectory": dict(n_list="64,256", replicates=50),
    "oned-oracle": dict(n_list="1,2,10,50", replicates=20000),
    "ansatz-defect": dict(n_list="256", replicates=50, multipliers="1,4,16"),
}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="base seed (64-bit)")
    g.add_argument("--replicates", type=int, help="replicates per n")
    g.add_argument("--replicates-at", action="append", metavar="N:R", help="override replicates at one n")
    g.add_argument("--out", help="output file (default: <experiment>.<format>)")
    g.add_argument("--format", choices=("csv", "json"), default="csv")
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--solver-mode", choices=(EXACT, APPROX), default=APPROX)
    g.add_argument("--grid-k", type=int, help="transport grid resolution (default 4*ceil(sqrt(n)), even)")
    g.add_argument("--cutoff-tol", type=float, default=1e-12)
    g.add_argument("--quad-nodes", type=int, default=32)
    g.add_argument("--smoke", action="store_true", help="reduce replicate counts 100x")
    g.add_argument("--n-list", help="comma-separated sample sizes")
    g.add_argument("--t", type=float, help="fixed regularization time (default t = 1/n)")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="torusmatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ex.RUNNERS:
        sp = sub.add_parser(name, parents=[common])
        if name == "covariance":
            sp.add_argument("--y", help="probe point u,v")
        if name == "ansatz-defect":
            sp.add_argument("--multipliers", help="comma-separated t multipliers m (t = m/n)")
    return p


def config_from_args(args) -> ex.ExperimentConfig:
    d = DEFAULTS[args.command]
    reps_at = args.replicates_at if args.replicates_at is not None else d.get("replicates_at", [])
    by_n = {}
    for item in reps_at:
        n, r = item.split(":")
        by_n[int(n)] = int(r)
    cfg = ex.ExperimentConfig(
        experiment=args.command,
        n_list=_ints(args.n_list or d["n_list"]),
        t_rule="fixed" if (args.t or d.get("t")) else "reciprocal-n",
        t_value=args.t or d.get("t"),
        grid_K=args.grid_k,
        replicates=args.replicates or d["replicates"],
        replicates_by_n=by_n,
        base_seed=args.seed,
        cutoff_tolerance=args.cutoff_tol,
        quadrature_nodes=args.quad_nodes,
        solver_mode=args.solver_mode,
        output_path=args.out or f"{args.command}.{args.format}",
        output_format=args.format,
        threads=args.threads,
    )
    return cfg.smoke() if args.smoke else cfg


def run(cfg: ex.ExperimentConfig, args) -> ex.ExperimentResult:
    runner = ex.RUNNERS[cfg.experiment]
    if cfg.experiment == "covariance":
        y = _floats(args.y or DEFAULTS["covariance"]["y"])
        if len(y) != 2:
            raise InvalidConfiguration("--y needs two coordinates")
        return runner(cfg, y=y)
    if cfg.experiment == "ansatz-defect":
        return runner(cfg, t_multipliers=_floats(args.multipliers or DEFAULTS["ansatz-defect"]["multipliers"]))
    return runner(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (InvalidConfiguration, InvalidInput, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run(cfg, args)
    except (InvalidConfiguration, InvalidInput) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.ExperimentAborted as e:
        ex.emit(e.records, [], cfg.output_format, cfg.output_path, cfg.base_seed)
        print(f"aborted: {e}; partial results in {cfg.output_path}", file=sys.stderr)
        return e.exit_code
    except (ConvergenceError, ex.SpectralIdentityError) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    ex.emit(result.records, result.summaries, cfg.output_format, cfg.output_path, cfg.base_seed)
    for line in result.report_lines():
        print(line)
    return EXIT_PASS if result.passed else EXIT_STAT


if __name__ == "__main__":
    sys.exit(main())
