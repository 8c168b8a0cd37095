from dataclasses import asdict

import numpy as np
import pytest

from taskseq.engines import Command, EnginePipeline
from taskseq.learning import (
    EpisodeDone,
    EpisodeObjective,
    ResetExhausted,
    SequenceEnv,
    TrainConfig,
    cem_train,
    evaluate,
)
from taskseq.scenario import PipelineFactory
from taskseq.sequencer import RewardConfig, TaskBlock, TaskSequence, run_training_episode
from taskseq.tasks import GRASP_DIM, handbuilt_grasp_params, make_grasp

from oracles import cem_quadratic_error

TRAIN = TaskSequence(("grasp", "pick"), 0)


@pytest.mark.parametrize(
    "kw", [dict(population=3), dict(elite_fraction=0.0), dict(elite_fraction=0.6), dict(iterations=0), dict(sigma_floor=0)]
)
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_cem_recovers_quadratic_optimum():
    for seed in range(3):
        assert cem_quadratic_error(seed=seed, iterations=20) <= 0.01


def test_sigma_floor_and_monotone_best():
    cfg = TrainConfig(population=16, iterations=30, sigma_floor=0.2, seed=1, episodes_per_candidate=1)
    rep = cem_train(lambda p, s: -float(np.sum(np.square(p))), 3, cfg)
    assert all(min(it.sigma) >= 0.2 for it in rep.iterations)
    best = [it.best_so_far for it in rep.iterations]
    assert best == sorted(best)


@pytest.mark.parametrize("seed", range(3))
def test_plain_cem_also_converges(seed):
    cfg = TrainConfig(iterations=20, seed=seed, episodes_per_candidate=1, keep_elites=False)
    rep = cem_train(lambda p, s: -((p[0] - 3.0) ** 2), 1, cfg)
    assert abs(rep.params[0] - 3.0) <= 0.01


def noisy(p, s):
    return -((p[0] - 1.0) ** 2) + np.random.default_rng(s).normal(0, 0.1)


def strip_clock(rep):
    d = asdict(rep)
    d.pop("wall_clock")
    return d


def test_cem_deterministic():
    cfg = TrainConfig(population=8, iterations=5, seed=3, episodes_per_candidate=2)
    assert strip_clock(cem_train(noisy, 2, cfg)) == strip_clock(cem_train(noisy, 2, cfg))


def small_objective(registry):
    return EpisodeObjective(TRAIN, registry, PipelineFactory(0.01), RewardConfig(alpha=0, step_cost=0))


def test_parallel_matches_serial(registry):
    obj = small_objective(registry)
    cfg = TrainConfig(population=6, iterations=2, episodes_per_candidate=2, seed=4)
    init = handbuilt_grasp_params()
    serial = cem_train(obj, GRASP_DIM, cfg, workers=1, init_mean=init)
    parallel = cem_train(obj, GRASP_DIM, cfg, workers=3, init_mean=init)
    assert strip_clock(serial) == strip_clock(parallel)


def test_objective_is_pure(registry):
    obj = small_objective(registry)
    first = obj(handbuilt_grasp_params(), 0)
    obj(np.zeros(GRASP_DIM), 1)
    assert obj(handbuilt_grasp_params(), 0) == first == 10.0


# environment


def make_env(registry, reward=RewardConfig()):
    return SequenceEnv(TRAIN, registry, EnginePipeline.local(), reward)


def test_env_reset_deterministic(registry):
    env = make_env(registry)
    assert env.reset(9) == env.reset(9)


def test_env_terminate_finishes(registry):
    env = make_env(registry)
    env.reset(0)
    _, r, done = env.step(Command(), True)
    assert done
    assert r == pytest.approx(-1.3 * 1.0 - 0.01 - 5.0, abs=0.05)  # far, no contact, pick fails
    with pytest.raises(EpisodeDone):
        env.step(Command(), False)


def test_env_step_before_reset(registry):
    with pytest.raises(EpisodeDone):
        make_env(registry).step(Command(), False)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_env_rewards_sum_to_episode_return(registry, seed):
    from taskseq.tasks import LinearGraspPolicy

    policy = LinearGraspPolicy(handbuilt_grasp_params())
    env = make_env(registry)
    env.reset(seed)
    total, done = 0.0, False
    while not done:
        _, r, done = env.step(*policy.act(env.context()))
        total += r
    res = run_training_episode(TRAIN, handbuilt_grasp_params(), registry, EnginePipeline.local(), seed)
    assert total == res.episode_return


def test_reset_gives_up_after_hundred_attempts(registry):
    reg = dict(registry)
    reg["grasp"] = TaskBlock("grasp", registry["grasp"].model, tuple([0.0] * GRASP_DIM))
    env = SequenceEnv(TaskSequence(("grasp", "pick"), 1), reg, EnginePipeline.local())
    with pytest.raises(ResetExhausted):
        env.reset(0)


# evaluation


def fixed_registry(width=0.08):
    from taskseq.tasks import make_pick

    return {
        "grasp": TaskBlock("grasp", make_grasp({}).with_actors({"target": {"width": width}})),
        "pick": TaskBlock("pick", make_pick({})),
    }


def test_handbuilt_params_on_fixed_width():
    rate = evaluate(handbuilt_grasp_params(), TaskSequence(("grasp", "pick")), fixed_registry(), EnginePipeline.local(), 100, 0)
    assert rate >= 0.99


def test_zero_params_score_zero():
    rate = evaluate([0.0] * GRASP_DIM, TaskSequence(("grasp", "pick")), fixed_registry(), EnginePipeline.local(), 20, 0)
    assert rate == 0.0


def test_no_episodes_warns():
    with pytest.warns(RuntimeWarning):
        assert evaluate(None, TaskSequence(("grasp",)), fixed_registry(), EnginePipeline.local(), 0, 0) == 0.0
