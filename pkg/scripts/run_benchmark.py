"""Run (or reuse) the four-mode synthetic benchmark and print the summary.

    python3 scripts/run_benchmark.py [--out runs/benchmark] [--config configs/benchmark.cfg] [--seeds 0 1 2]
"""

import argparse
import json
from pathlib import Path

from ssod.benchmark import SEEDS, run_benchmark

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--out", default=str(ROOT / "runs" / "benchmark"))
    p.add_argument("--config", default=str(ROOT / "configs" / "benchmark.cfg"))
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    args = p.parse_args()
    res = run_benchmark(args.out, args.config, seeds=args.seeds)
    print(json.dumps(res["summary"], indent=1))


if __name__ == "__main__":
    main()
