#!/usr/bin/env python3
"""Count outcomes of an execute scenario over a range of seeds."""

import argparse
import collections

from taskseq.scenario import build_pipeline, build_registry, load_scenario
from taskseq.sequencer import TaskSequence, episode_goals_hold, run_sequence


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenarios", nargs="+")
    ap.add_argument("--seeds", type=int, default=100)
    args = ap.parse_args()
    for path in args.scenarios:
        s = load_scenario(path)
        registry = build_registry(s)
        pipe = build_pipeline(s)
        outcomes = collections.Counter()
        goals = 0
        for seed in range(args.seeds):
            res = run_sequence(TaskSequence(s.sequence), None, registry, pipe, seed, log=False)
            outcomes[str(res.outcome)] += 1
            goals += episode_goals_hold(res, registry, pipe)
        pipe.close()
        print(f"{path}: {dict(outcomes)}; all goals hold in {goals}/{args.seeds}")


if __name__ == "__main__":
    run()
