#!/usr/bin/env python3
"""Print the tables of an existing report.json (from sweep, solve or evaluate)."""

import sys
from pathlib import Path

from chi_ilqr import bench
from run_experiment import print_tables

if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: show_report.py <output dir or report.json>")
    path = Path(sys.argv[1])
    if path.is_dir():
        path = path / "report.json"
    print_tables(bench.ExperimentReport.from_json(path.read_text()))
