"""Episodic environment over a training sequence, and a cross-entropy-method trainer."""

from __future__ import annotations

import logging
import multiprocessing
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .engines import Command, EnginePipeline
from .sequencer import (
    DEFAULT_REWARD,
    InfeasibleEpisode,
    RewardConfig,
    TaskBlock,
    TaskRun,
    TaskSequence,
    episode_goals_hold,
    run_sequence,
    run_training_episode,
    start_training_task,
    step_reward,
    terminal_sufficient,
)
from .world import derive_seed

log = logging.getLogger(__name__)

RESET_ATTEMPTS = 100


class ResetExhausted(RuntimeError):
    pass


class EpisodeDone(RuntimeError):
    pass


def attempt_seed(episode_seed: int, attempt: int) -> int:
    return episode_seed if attempt == 0 else derive_seed(episode_seed, 0x5EED, attempt)


@dataclass(frozen=True)
class TrainConfig:
    population: int = 64
    elite_fraction: float = 0.125
    iterations: int = 50
    episodes_per_candidate: int = 8
    init_sigma: float = 1.0
    sigma_floor: float = 0.05
    seed: int = 0
    keep_elites: bool = True  # previous elites (with their scores) compete in the next selection

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("population must be at least 4")
        if not 0 < self.elite_fraction <= 0.5:
            raise ValueError("elite_fraction must lie in (0, 0.5]")
        if min(self.iterations, self.episodes_per_candidate) < 1 or self.init_sigma <= 0 or self.sigma_floor <= 0:
            raise ValueError("iterations, episodes, init_sigma and sigma_floor must be positive")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.population * self.elite_fraction)))


@dataclass
class IterationStats:
    iteration: int
    mean_return: float
    best_return: float
    best_so_far: float
    mean: list[float]
    sigma: list[float]


@dataclass
class TrainReport:
    iterations: list[IterationStats] = field(default_factory=list)
    params: list[float] = field(default_factory=list)
    best_params: list[float] = field(default_factory=list)
    best_return: float = float("-inf")
    wall_clock: float = 0.0


class SequenceEnv:
    """reset/step view of a training sequence, for external RL code.

    Actions are ``(command, terminate)`` pairs; the terminal reward is folded into the
    last step's reward.
    """

    def __init__(self, seq: TaskSequence, registry: dict[str, TaskBlock], pipeline: EnginePipeline,
                 reward: RewardConfig = DEFAULT_REWARD):
        if not seq.training:
            raise ValueError("environment needs a training sequence")
        self.seq = seq
        self.registry = registry
        self.pipeline = pipeline
        self.reward = reward
        self.run: Optional[TaskRun] = None
        self.episode_return = 0.0

    def reset(self, episode_seed: int) -> tuple[float, ...]:
        for attempt in range(RESET_ATTEMPTS):
            try:
                self.run = start_training_task(self.seq, self.registry, self.pipeline, attempt_seed(episode_seed, attempt), None)
            except InfeasibleEpisode:
                continue
            self.episode_return = 0.0
            return self.run.observation
        raise ResetExhausted(f"no feasible episode in {RESET_ATTEMPTS} attempts from seed {episode_seed}")

    @property
    def done(self) -> bool:
        return self.run is None or self.run.done

    def step(self, command: Command, terminate: bool) -> tuple[tuple[float, ...], float, bool]:
        if self.run is None:
            raise EpisodeDone("reset() before step()")
        if self.run.done:
            raise EpisodeDone("episode finished; call reset()")
        run = self.run
        _, cost = run.advance(command, terminate)
        if terminate:
            r = step_reward(cost, True, terminal_sufficient(self.seq, run, self.registry, self.pipeline), self.reward)
        elif run.timed_out:
            r = step_reward(cost, True, False, self.reward)
        else:
            r = step_reward(cost, False, None, self.reward)
        self.episode_return += r
        return run.observation, r, run.done

    def context(self):
        return self.run.context()


@dataclass
class EpisodeObjective:
    """Training return of a candidate on one seeded episode.

    The pipeline is built lazily, so each forked worker ends up with its own engines.
    """

    seq: TaskSequence
    registry: dict
    pipeline_factory: Callable[[], EnginePipeline]
    reward: RewardConfig = DEFAULT_REWARD
    _pipeline: Optional[EnginePipeline] = field(default=None, repr=False, compare=False)

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_pipeline"] = None
        return d

    @property
    def pipeline(self) -> EnginePipeline:
        if self._pipeline is None:
            self._pipeline = self.pipeline_factory()
        return self._pipeline

    def __call__(self, params, episode_seed: int) -> float:
        params = tuple(float(p) for p in params)
        for attempt in range(RESET_ATTEMPTS):
            try:
                res = run_training_episode(
                    self.seq, params, self.registry, self.pipeline, attempt_seed(episode_seed, attempt), self.reward, log=False
                )
            except InfeasibleEpisode:
                continue
            return res.episode_return
        raise ResetExhausted(f"no feasible episode in {RESET_ATTEMPTS} attempts from seed {episode_seed}")


_worker_objective = None


def _init_worker(objective):
    global _worker_objective
    _worker_objective = objective


def _score(job):
    idx, params, seeds = job
    total = 0.0
    for s in seeds:
        total += _worker_objective(params, s)
    return idx, total / len(seeds)


def cem_train(
    objective: Callable[[Sequence[float], int], float],
    dim: int,
    config: TrainConfig = TrainConfig(),
    workers: int = 1,
    init_mean: Optional[Sequence[float]] = None,
    progress: Optional[Callable[[IterationStats], None]] = None,
) -> TrainReport:
    """Maximise the mean of ``objective(params, episode_seed)`` with a diagonal-Gaussian CEM.

    Candidate and episode seeds are pure functions of (config.seed, iteration,
    candidate, episode), so the report does not depend on ``workers``.
    """
    t0 = time.perf_counter()
    mu = np.zeros(dim) if init_mean is None else np.asarray(init_mean, dtype=float).copy()
    sigma = np.full(dim, float(config.init_sigma))
    report = TrainReport()
    best_so_far, best_params = -np.inf, mu.copy()
    elite_x = elite_s = None
    pool = None
    if workers > 1:
        ctx = multiprocessing.get_context("fork")
        pool = ctx.Pool(workers, initializer=_init_worker, initargs=(objective,))
    else:
        _init_worker(objective)
    try:
        for it in range(config.iterations):
            rng = np.random.default_rng(derive_seed(config.seed, it))
            pop = mu + sigma * rng.standard_normal((config.population, dim))
            jobs = [
                (c, pop[c].tolist(), [derive_seed(config.seed, it, c, e) for e in range(config.episodes_per_candidate)])
                for c in range(config.population)
            ]
            scored = pool.map(_score, jobs, chunksize=1) if pool else [_score(j) for j in jobs]
            scores = np.empty(config.population)
            for c, s in scored:
                scores[c] = s
            if scores.max() > best_so_far:
                best_so_far, best_params = float(scores.max()), pop[int(np.argmax(scores))].copy()
            pool_x, pool_s = pop, scores
            if config.keep_elites and elite_x is not None:
                pool_x, pool_s = np.vstack([elite_x, pop]), np.concatenate([elite_s, scores])
            # stable sort: ties go to retained elites, then to lower candidate index
            order = np.argsort(-pool_s, kind="stable")[: config.n_elite]
            elite_x, elite_s = pool_x[order], pool_s[order]
            mu = elite_x.mean(axis=0)
            sigma = np.maximum(elite_x.std(axis=0), config.sigma_floor)
            stats = IterationStats(it, float(scores.mean()), float(scores.max()), float(best_so_far), mu.tolist(), sigma.tolist())
            report.iterations.append(stats)
            log.info("iteration %d: mean %.3f best %.3f", it, stats.mean_return, stats.best_return)
            if progress:
                progress(stats)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    report.params = mu.tolist()
    report.best_params = best_params.tolist()
    report.best_return = float(best_so_far)
    report.wall_clock = time.perf_counter() - t0
    return report


def evaluate(
    params,
    seq: TaskSequence,
    registry: dict[str, TaskBlock],
    pipeline: EnginePipeline,
    n_episodes: int,
    seed: int,
    task_id: Optional[str] = None,
) -> float:
    """Fraction of seeded Execute-mode episodes ending in Success with every goal predicate true.

    ``params`` (if given) is installed as the frozen policy of ``task_id``.
    """
    if n_episodes <= 0:
        warnings.warn("evaluate called with no episodes; success rate defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if params is not None:
        if task_id is None:
            task_id = next(t for t in seq.tasks if registry[t].model.trainable)
        block = registry[task_id]
        registry = dict(registry)
        registry[task_id] = TaskBlock(block.id, block.model, tuple(float(p) for p in params))
    seq = TaskSequence(seq.tasks)
    wins = 0
    for i in range(n_episodes):
        res = run_sequence(seq, None, registry, pipeline, derive_seed(seed, i), log=False)
        wins += episode_goals_hold(res, registry, pipeline)
    return wins / n_episodes


def report_lines(report: TrainReport) -> list[dict]:
    return [asdict(s) for s in report.iterations]
