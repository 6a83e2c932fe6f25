"""Command line entry points: experiments, single solves, checks, dimensions."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np


def _cmd_experiment(args):
    from .experiments import preset, run_experiment, write_report

    overrides = {}
    if args.ell:
        overrides["ell"] = args.ell
    specs = preset(args.preset, trials=args.trials, seed=args.seed, **overrides)
    if args.cells:
        wanted = set(args.cells.split(","))
        specs = [s for s in specs if s.cell_id() in wanted]

    def progress(cell, agg):
        print(f"[{cell}] {agg}", flush=True)

    report = run_experiment(specs, workers=args.workers, progress=progress)
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")
    else:
        json.dump(report["cells"], sys.stdout, indent=1)
        print()
    return 0


def _cmd_solve(args):
    from .family import Family
    from .irls import GammaSchedule, SolverConfig, run
    from .airls import AirlsConfig, run_airls
    from .operators import read_operator
    from .tensor import Shape

    with open(args.config) as fh:
        cfg = json.load(fh)
    op = read_operator(args.operator)
    with open(args.measurements) as fh:
        y = np.asarray(json.load(fh), dtype=float)
    family = Family(cfg["family"]["d"], cfg["family"]["subsets"])
    method = cfg.get("method", "full-image")
    schedule = GammaSchedule(
        gamma0=cfg.get("gamma0"),
        decline=cfg.get("decline", 1 / 1.2),
        gamma_min=cfg.get("gamma_min"),
    )
    if method.startswith("full"):
        config = SolverConfig(
            schedule=schedule,
            max_iters=cfg.get("max_iters", 3000),
            method="relaxed" if method == "full-relaxed" else "image",
        )
        report = run(config, op, y, family)
    else:
        shape = Shape(cfg["shape"])
        rank_cfg = cfg.get("ranks", {"policy": "adaptive", "max": 5})
        if rank_cfg.get("policy") == "fixed":
            policy = ("fixed", rank_cfg["value"])
        else:
            policy = ("adaptive", rank_cfg.get("min", 1), rank_cfg.get("max", 5))
        config = AirlsConfig(
            schedule=schedule,
            rank_policy=policy,
            path_scope="neigh" if method == "airls-neigh" else "all",
            validation_fraction=cfg.get("validation_fraction", 0.0),
            max_sweeps=cfg.get("max_sweeps", 3000),
        )
        report = run_airls(config, op, y, family, shape, seed=cfg.get("seed", 0))
    report.save(args.out)
    if args.trace:
        report.write_trace_csv(args.trace)
    print(f"terminated: {report.termination}; report at {args.out}")
    return 0


def _cmd_check(args):
    from .checks import run_suite

    names = None if args.suite in (None, "oracles", "all") else {args.suite}
    failures = 0
    for name, err, tol in run_suite(names):
        ok = err <= tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max error {err:.3e} (tol {tol:.1e})")
    return 1 if failures else 0


def _cmd_dim(args):
    from .family import Family, RankVector, build_tree, variety_dim
    from .tensor import Shape

    family = Family.load(args.family)
    shape = Shape([int(n) for n in args.shape.split(",")])
    ranks = [int(r) for r in args.ranks.split(",")]
    graph = build_tree(family)
    if len(ranks) == 1:
        rv = RankVector(family, ranks[0])
    else:
        rv = RankVector(family, dict(zip(family.subsets, ranks)))
    print(variety_dim(rv, shape, graph))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="sumrank",
        description="sum-of-ranks tensor recovery: solvers, experiments, checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_exp = sub.add_parser("experiment", help="run a preset experiment grid")
    p_exp.add_argument("--preset", required=True,
                       choices=["exp00", "exp0", "exp0_", "exp1", "exp2", "exp2-smoke"])
    p_exp.add_argument("--trials", type=int, default=None)
    p_exp.add_argument("--seed", type=int, default=7)
    p_exp.add_argument("--ell", type=int, default=None)
    p_exp.add_argument("--cells", default=None, help="comma separated cell filter")
    p_exp.add_argument("--workers", type=int, default=None)
    p_exp.add_argument("--out", default=None)
    p_exp.set_defaults(func=_cmd_experiment)

    p_solve = sub.add_parser("solve", help="solve one instance from files")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--operator", required=True)
    p_solve.add_argument("--measurements", required=True)
    p_solve.add_argument("--out", default="report.json")
    p_solve.add_argument("--trace", default=None)
    p_solve.set_defaults(func=_cmd_solve)

    p_check = sub.add_parser("check", help="run the oracle comparison suites")
    p_check.add_argument("--suite", default="oracles")
    p_check.set_defaults(func=_cmd_check)

    p_dim = sub.add_parser("dim", help="variety dimension of a rank vector")
    p_dim.add_argument("--family", required=True)
    p_dim.add_argument("--shape", required=True)
    p_dim.add_argument("--ranks", required=True)
    p_dim.set_defaults(func=_cmd_dim)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
