"""Run every shipped demo config and print one status line per experiment.

usage: python3 scripts/run_demos.py [--out runs] [--threads 1] [stem ...]
"""

import argparse
import sys
import time
from pathlib import Path

from tamedns.cli import run
from tamedns.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("stems", nargs="*", help="config names without .yaml (default: all)")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    stems = args.stems or sorted(p.stem for p in CONFIGS.glob("*.yaml"))
    worst = 0
    for stem in stems:
        t0 = time.perf_counter()
        code = run(load_config(CONFIGS / f"{stem}.yaml"), Path(args.out) / stem, args.threads,
                   echo=lambda s: None)
        status = {0: "pass", 1: "CHECK FAILED", 2: "INVALID"}[code]
        print(f"{stem:22s} {status:12s} {time.perf_counter() - t0:7.1f} s  -> {Path(args.out) / stem}")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
