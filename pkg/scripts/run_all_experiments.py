#!/usr/bin/env python3
"""Run every experiment with its default configuration and write results/<name>.csv.

    python scripts/run_all_experiments.py [--smoke] [--threads 8] [--only scaling,trajectory]
"""
import argparse
import sys
import time
from pathlib import Path

from torusmatch import cli
from torusmatch.experiments import RUNNERS


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--smoke", action="store_true")
    p.add_argument("--threads", type=int, default=8)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--only", default=",".join(RUNNERS))
    args = p.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    worst = 0
    for name in args.only.split(","):
        argv = [name, "--threads", str(args.threads), "--out", str(out / f"{name}.csv")]
        if args.smoke:
            argv.append("--smoke")
        t0 = time.perf_counter()
        print(f"== {name}", flush=True)
        code = cli.main(argv)
        print(f"== {name} exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
