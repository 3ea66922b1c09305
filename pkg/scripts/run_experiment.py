#!/usr/bin/env python3
"""Run a paired experiment from a YAML config and print a results table.

    python scripts/run_experiment.py scripts/configs/hopper_weights.yaml
    python scripts/run_experiment.py scripts/configs/quadruped.yaml --out out/quad
"""

import argparse
import logging
import math

from chi_ilqr import bench


def pct(new, old):
    return 100.0 * (new - old) / abs(old) if old else math.nan


def print_tables(report: bench.ExperimentReport) -> None:
    trials = sorted({s.weight_trial for s in report.solves})
    print(f"{'trial':>5} {'J vanilla':>10} {'J chi-traj':>10} {'chi vanilla':>12} {'chi chi-traj':>12} {'change':>8}")
    for t in trials:
        try:
            v, c = report.solve_summary(t, "vanilla"), report.solve_summary(t, "chi")
        except KeyError:
            continue
        print(f"{t + 1:>5} {v.J:>10.4g} {c.J_vanilla_cost:>10.4g} {v.chi:>12.4g} {c.chi:>12.4g} "
              f"{pct(c.chi, v.chi):>7.1f}%")
    if not report.cells:
        return
    print()
    print(f"{'trial':>5} {'cov':>8} {'mean E van':>11} {'mean E chi':>11} {'mean F van':>11} {'mean F chi':>11} "
          f"{'excluded':>9}")
    for t in trials:
        for cov in sorted({c.cov for c in report.cells}):
            try:
                v, c = report.cell(t, "vanilla", cov), report.cell(t, "chi", cov)
            except KeyError:
                continue
            print(f"{t + 1:>5} {cov:>8.0e} {v.mean_E:>11.4g} {c.mean_E:>11.4g} {v.mean_F:>11.4g} {c.mean_F:>11.4g} "
                  f"{v.excluded:>4}/{c.excluded:<4}")
    print()
    for (t, kind, thr), curve in sorted(bench.success_curves(report).items()):
        print(f"success E<{thr:g} trial {t + 1} {kind:>7}: " + " ".join(f"{cov:.0e}:{r:.2f}" for cov, r in curve))
    for t in trials:
        onset = {k: bench.failure_onset(report, t, k, report.config["thresholds"][0]) for k in bench.TRAJ_KINDS}
        print(f"trial {t + 1} first covariance with E > {report.config['thresholds'][0]:g}: {onset}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--trials", type=int, help="override the number of Monte-Carlo trials")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = bench.load_config(args.config)
    if args.trials is not None:
        cfg.trials = args.trials
    report = bench.run_experiment(cfg, args.out)
    print_tables(report)


if __name__ == "__main__":
    main()
