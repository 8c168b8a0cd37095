#!/usr/bin/env python3
"""Success rate of grasp policies drawn from N(0, 1), the untrained baseline."""

import argparse

import numpy as np

from taskseq.engines import EnginePipeline
from taskseq.learning import evaluate
from taskseq.scenario import build_registry, load_scenario
from taskseq.world import derive_seed


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default="scenarios/grasp_train.json")
    ap.add_argument("--policies", type=int, default=100)
    ap.add_argument("--episodes", type=int, default=10, help="episodes per sampled policy")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    s = load_scenario(args.scenario)
    registry = build_registry(s)
    block = registry[s.train_task]
    pipe = EnginePipeline.local(s.distance_noise)
    rng = np.random.default_rng(args.seed)
    rates = []
    for k in range(args.policies):
        w = rng.standard_normal(block.model.param_dim)
        rates.append(evaluate(w, s.task_sequence(), registry, pipe, args.episodes, derive_seed(1000, k), s.train_task))
    rates = np.array(rates)
    print(f"{args.policies} random policies x {args.episodes} episodes: mean success {rates.mean():.3f}, "
          f"best {rates.max():.2f}, any success in {np.count_nonzero(rates)} policies")


if __name__ == "__main__":
    run()
