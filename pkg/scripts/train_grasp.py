#!/usr/bin/env python3
"""Train a grasp scenario, then score the frozen policy on held-out seeds.

    python scripts/train_grasp.py scenarios/grasp_train.json --out runs/grasp
"""

import argparse
import json
import sys
import time
from pathlib import Path

from taskseq.cli import main as taskseq


def run():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("scenario")
    ap.add_argument("--out", default="runs/grasp")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--episodes", type=int, default=100)
    ap.add_argument("--eval-seed", type=int, default=1000)
    args = ap.parse_args()

    t0 = time.perf_counter()
    code = taskseq(["train", args.scenario, "--out", args.out, "--workers", str(args.workers), "--log-level", "INFO"])
    if code:
        return code
    elapsed = time.perf_counter() - t0
    params_name = json.loads(Path(args.scenario).read_text()).get("output", {}).get("params", "policy.params")
    print(f"trained in {elapsed:.1f}s with {args.workers} worker(s)", file=sys.stderr)
    return taskseq(["evaluate", args.scenario, "--episodes", str(args.episodes), "--seed", str(args.eval_seed),
                    "--params", str(Path(args.out) / params_name)])


if __name__ == "__main__":
    sys.exit(run())
