#!/usr/bin/env python3
"""Door-opening rollouts over hinge radii: final angle error, wrist force after probing, radius error."""

import argparse
import math

import numpy as np

from taskseq.engines import EnginePipeline, door_angle
from taskseq.sequencer import TaskBlock, TaskRun, episode_world
from taskseq.tasks import make_door_open


def rollout(radius, noise, seed, probe=3):
    model = make_door_open({}).with_actors({"environment": {"hinge_radius": radius}})
    run = TaskRun(TaskBlock("door_open", model), episode_world(model, seed), EnginePipeline.local(noise), seed)
    forces = []
    while not run.done:
        run.advance(*run.decide())
        forces.append(run.world.wrist_force)
    angle = math.degrees(door_angle(run.world, "door"))
    return angle - 60.0, max(forces[probe:], default=0.0), (run.policy.est.radius_est - radius) / radius, run.steps


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--radii", type=float, nargs="+", default=list(np.round(np.linspace(0.4, 1.0, 7), 3)))
    ap.add_argument("--noise", type=float, default=0.0, help="distance-estimate sigma (does not affect the door)")
    args = ap.parse_args()
    print(f"{'radius':>7} {'angle err (deg)':>16} {'max force (N)':>14} {'radius err':>11} {'steps':>6}")
    for r in args.radii:
        da, f, dr, n = rollout(r, args.noise, 0)
        print(f"{r:7.3f} {da:16.4f} {f:14.2e} {dr:11.2e} {n:6d}")


if __name__ == "__main__":
    run()
