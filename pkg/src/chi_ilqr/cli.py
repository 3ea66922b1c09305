"""Command line entry point: ``chi-ilqr {solve,evaluate,sweep,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .hybrid import HybridError
from .ilqr import SolverError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_EVAL = 0, 2, 3, 4


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers: {err}")


def cmd_solve(args) -> int:
    cfg = bench.load_config(args.config)
    if cfg.model != args.model:
        raise bench.ConfigError(f"--model {args.model} disagrees with config model {cfg.model}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    system = cfg.system()
    task = cfg.task_spec()
    report = bench.ExperimentReport(cfg.to_dict())
    failed = []
    for idx in range(len(cfg.weight_trials)):
        modes = ("vanilla", "chi") if args.mode == "chi" and cfg.warm_start else (args.mode,)
        base = cfg.weight_trials[idx].weights(task, system.m).with_q_chi(0.0)
        try:
            arts = bench.solve_pair(cfg, idx, modes, system)
        except (SolverError, HybridError) as err:
            logging.error("weight trial %d: %s", idx, err)
            failed.append(idx)
            continue
        art = arts[args.mode]
        report.solves.append(bench.summarize_solve(idx, args.mode, art, base))
        bench.write_solve_csv(out / f"solve_{bench.solve_name(idx, args.mode)}.csv", art)
        print(f"trial {idx} {args.mode}: J={art.J:.6g} chi={art.chi:.6g} J_chi={art.J_chi:.6g} "
              f"status={art.status} iterations={art.iterations}")
    bench.write_report(report, out)
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, old, nominals = bench.load_artifacts(args.artifacts)
    if args.trials < 0 or not args.cov or any(c <= 0 for c in args.cov):
        raise bench.ConfigError("--trials must be >= 0 and --cov must list positive variances")
    records, cells = bench.evaluate(cfg, nominals, args.cov, args.trials, args.seed)
    report = bench.ExperimentReport(old.config, old.solves, cells, records)
    bench.write_report(report, args.out)
    for c in cells:
        print(f"trial {c.weight_trial} {c.traj} cov={c.cov:g}: mean E={c.mean_E:.4g} mean F={c.mean_F:.4g} "
              f"excluded={c.excluded} success={c.success}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = bench.load_config(args.config)
    report = bench.run_experiment(cfg, args.out)
    for s in report.solves:
        print(f"trial {s.weight_trial} {s.traj}: J={s.J:.6g} chi={s.chi:.6g} status={s.status}")
    for c in report.cells:
        print(f"trial {c.weight_trial} {c.traj} cov={c.cov:g}: mean E={c.mean_E:.4g} mean F={c.mean_F:.4g} "
              f"success={c.success}")
    return EXIT_SOLVER if any(s.status == "failed" for s in report.solves) else EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_EVAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chi-ilqr", description="Convergent hybrid iLQR solver and benchmarks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve every weight trial of a config in one mode")
    s.add_argument("--model", required=True, choices=sorted(bench.MODELS))
    s.add_argument("--config", required=True)
    s.add_argument("--mode", required=True, choices=["vanilla", "chi"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("evaluate", help="Monte-Carlo tracking of saved solves")
    e.add_argument("--artifacts", required=True)
    e.add_argument("--cov", required=True, type=_floats)
    e.add_argument("--trials", required=True, type=int)
    e.add_argument("--seed", required=True, type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="paired solves plus evaluation over all covariances")
    w.add_argument("--config", required=True)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    t = sub.add_parser("selftest", help="run the fast oracle checks")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except bench.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except bench.EvaluationError as err:
        print(f"evaluation failed: {err}", file=sys.stderr)
        return EXIT_EVAL
    except (SolverError, HybridError) as err:
        print(f"solver failed: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
