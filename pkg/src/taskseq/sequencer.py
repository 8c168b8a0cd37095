"""Concept interface: switch between task blocks in execution, and orchestrate training episodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from .concept import (
    ConceptModel,
    GoalPredicate,
    IncompatibleState,
    StepContext,
    instantiate,
    sample_actor_configuration,
    sufficient_satisfied,
)
from .engines import ZERO_COMMAND, Command, EnginePipeline
from .world import ObservableState, WorldState, derive_seed
from . import wire

SUCCESS = "success"
TASK_TIMEOUT = "task_timeout"
INFEASIBLE = "infeasible"

CONFIG_STREAM = 1  # derive_seed(seed, CONFIG_STREAM) draws the actor configuration


class UnknownTask(KeyError):
    pass


class InfeasibleEpisode(RuntimeError):
    """A pre-sequent task failed; the training episode is discarded and the seed resampled."""

    def __init__(self, result: "EpisodeResult"):
        super().__init__(f"pre-sequent task {result.outcome.task_id!r} failed ({result.outcome.kind})")
        self.result = result


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    step_cost: float = 0.01
    bonus: float = 10.0
    penalty: float = 5.0


DEFAULT_REWARD = RewardConfig()


def step_reward(cost_nec: float, terminated: bool, sufficient: Optional[bool], cfg: RewardConfig = DEFAULT_REWARD) -> float:
    if (sufficient is None) == terminated:
        raise ValueError("sufficient must be given exactly when the step terminates")
    r = -cfg.alpha * cost_nec - cfg.step_cost
    if terminated:
        r += cfg.bonus if sufficient else -cfg.penalty
    return r


@dataclass(frozen=True)
class TaskBlock:
    """A registry entry: a concept model plus the frozen parameters of its policy, if any."""

    id: str
    model: ConceptModel
    params: Optional[tuple[float, ...]] = None

    def policy(self, candidate=None):
        weights = candidate if candidate is not None else self.params
        return self.model.policy_factory(weights)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[str, ...]
    train_index: Optional[int] = None  # None means Execute mode

    @property
    def training(self) -> bool:
        return self.train_index is not None

    def check(self, registry: dict[str, TaskBlock]) -> None:
        for t in self.tasks:
            if t not in registry:
                raise UnknownTask(t)
        if self.train_index is not None and not 0 <= self.train_index < len(self.tasks):
            raise IndexError(f"train index {self.train_index} outside sequence of {len(self.tasks)}")


@dataclass(frozen=True)
class StepLog:
    time_step: int
    task_id: str
    world: WorldState
    observation: tuple[float, ...]
    command: Command
    terminate: bool
    necessary_cost: float
    reward: float

    def to_wire(self) -> dict:
        return {
            "t": self.time_step,
            "task": self.task_id,
            "world": wire.state_to_wire(self.world),
            "obs": [wire.hexfloat(v) for v in self.observation],
            "cmd": wire.command_to_wire(self.command),
            "terminate": self.terminate,
            "necessary_cost": wire.hexfloat(self.necessary_cost),
            "reward": wire.hexfloat(self.reward),
        }


@dataclass(frozen=True)
class Outcome:
    kind: str
    task_id: Optional[str] = None

    @property
    def success(self) -> bool:
        return self.kind == SUCCESS

    def __str__(self):
        return self.kind if self.task_id is None else f"{self.kind}({self.task_id})"


@dataclass
class TaskRecord:
    task_id: str
    start: WorldState
    end: WorldState
    terminated: bool
    steps: int


@dataclass
class EpisodeResult:
    outcome: Outcome
    trajectory: list[StepLog] = field(default_factory=list)
    episode_return: Optional[float] = None
    tasks: list[TaskRecord] = field(default_factory=list)
    sufficient_evaluations: int = 0
    seed: int = 0

    def summary(self) -> dict:
        out: dict[str, Any] = {"outcome": self.outcome.kind, "steps": len(self.trajectory), "seed": self.seed}
        if self.outcome.task_id is not None:
            out["task"] = self.outcome.task_id
        if self.episode_return is not None:
            out["return"] = wire.hexfloat(self.episode_return)
        return out

    def log_lines(self) -> list[str]:
        lines = [wire.dumps(s.to_wire()) for s in self.trajectory]
        lines.append(wire.dumps({"summary": self.summary()}))
        return lines


def episode_world(model: ConceptModel, seed: int) -> WorldState:
    """Fresh initial world for the first task of an episode."""
    return instantiate(model, sample_actor_configuration(model, derive_seed(seed, CONFIG_STREAM)))


def _first_world(block: TaskBlock, initial: Optional[WorldState], previous: Optional[WorldState], seed: int):
    if previous is not None:
        return instantiate(block.model, previous_end_state=previous)
    if initial is not None:
        return instantiate(block.model, previous_end_state=initial)
    return episode_world(block.model, seed)


class TaskRun:
    """Steps one task block through the pipeline.  Shared by the sequencer and the RL environment."""

    def __init__(self, block: TaskBlock, world: WorldState, pipeline: EnginePipeline, seed: int, candidate=None):
        self.block = block
        self.model = block.model
        self.pipeline = pipeline
        self.seed = seed
        self.policy = block.policy(candidate)
        frame = pipeline.observe(world, seed)
        self.world = world
        self.start_world = world
        self.observable: ObservableState = frame.observable
        self.observation: tuple[float, ...] = frame.observation
        self.start_observable = frame.observable
        self.steps = 0
        self.terminated = False

    @property
    def timed_out(self) -> bool:
        return not self.terminated and self.steps >= self.model.max_steps

    @property
    def done(self) -> bool:
        return self.terminated or self.steps >= self.model.max_steps

    def context(self) -> StepContext:
        return StepContext(self.world, self.observable, self.observation, self.start_world, self.start_observable)

    def decide(self) -> tuple[Command, bool]:
        return self.policy.act(self.context())

    def advance(self, command: Command, terminate: bool) -> tuple[Command, float]:
        """Apply one step; terminating steps hold still.  Returns the applied command and necessary cost."""
        if self.done:
            raise RuntimeError(f"task {self.block.id} already finished")
        if terminate:
            command = ZERO_COMMAND
        frame = self.pipeline.run(self.world, command, self.seed)
        self.world = frame.world
        self.observable = frame.observable
        self.observation = frame.observation
        self.steps += 1
        self.terminated = bool(terminate)
        cost = self.model.necessary_goal.evaluate(self.observable, self.start_observable)
        return frame.command, cost


def run_sequence(
    seq: TaskSequence,
    initial: Optional[WorldState],
    registry: dict[str, TaskBlock],
    pipeline: EnginePipeline,
    seed: int,
    log: bool = True,
) -> EpisodeResult:
    """Execute mode: run each task until it signals completion; never evaluates sufficient goals."""
    seq.check(registry)
    result = EpisodeResult(Outcome(SUCCESS), seed=seed)
    _run_blocks(seq.tasks, initial, registry, pipeline, seed, result, log)
    return result


def _run_blocks(task_ids, initial, registry, pipeline, seed, result: EpisodeResult, log: bool) -> Optional[WorldState]:
    world = None
    for task_id in task_ids:
        block = registry[task_id]
        try:
            start = _first_world(block, initial, world, seed)
        except IncompatibleState:
            result.outcome = Outcome(INFEASIBLE, task_id)
            return None
        run = TaskRun(block, start, pipeline, seed)
        while not run.done:
            cmd, term = run.decide()
            applied, cost = run.advance(cmd, term)
            if log:
                result.trajectory.append(
                    StepLog(run.world.time_step, task_id, run.world, run.observation, applied, term, cost, 0.0)
                )
        result.tasks.append(TaskRecord(task_id, run.start_world, run.world, run.terminated, run.steps))
        if not run.terminated:
            result.outcome = Outcome(TASK_TIMEOUT, task_id)
            return None
        world = run.world
    return world


def subsequent_runner(registry, pipeline, seed):
    """Runs a task list from a given world without logging; True iff every task succeeds."""

    def runner(task_ids: Sequence[str], world: WorldState) -> bool:
        scratch = EpisodeResult(Outcome(SUCCESS), seed=seed)
        _run_blocks(tuple(task_ids), world, registry, pipeline, seed, scratch, log=False)
        if not scratch.outcome.success:
            return False
        return all(goal_holds(registry[r.task_id].model, r) for r in scratch.tasks)

    return runner


def goal_holds(model: ConceptModel, record: TaskRecord) -> bool:
    goal = model.sufficient_goal
    if isinstance(goal, GoalPredicate):
        return goal.satisfied(record.end, record.start)
    return True


def start_training_task(seq: TaskSequence, registry, pipeline, seed: int, candidate) -> TaskRun:
    """Run the pre-sequent tasks and return the task-under-training, ready to step."""
    seq.check(registry)
    k = seq.train_index
    if k is None:
        raise ValueError("sequence is not in training mode")
    pre = EpisodeResult(Outcome(SUCCESS), seed=seed)
    world = _run_blocks(seq.tasks[:k], None, registry, pipeline, seed, pre, log=False)
    if not pre.outcome.success:
        raise InfeasibleEpisode(pre)
    block = registry[seq.tasks[k]]
    try:
        start = _first_world(block, None, world, seed)
    except IncompatibleState:
        raise InfeasibleEpisode(EpisodeResult(Outcome(INFEASIBLE, block.id), seed=seed)) from None
    return TaskRun(block, start, pipeline, seed, candidate)


def terminal_sufficient(seq: TaskSequence, run: TaskRun, registry, pipeline) -> bool:
    tail = seq.tasks[seq.train_index + 1 :]
    return sufficient_satisfied(
        run.model, run.world, subsequent_runner(registry, pipeline, run.seed), run.start_world, tail or None
    )


def run_training_episode(
    seq: TaskSequence,
    candidate_params,
    registry: dict[str, TaskBlock],
    pipeline: EnginePipeline,
    seed: int,
    reward: RewardConfig = DEFAULT_REWARD,
    log: bool = True,
) -> EpisodeResult:
    run = start_training_task(seq, registry, pipeline, seed, candidate_params)
    result = EpisodeResult(Outcome(SUCCESS), seed=seed, episode_return=0.0)
    total = 0.0
    while not run.done:
        cmd, term = run.decide()
        applied, cost = run.advance(cmd, term)
        sufficient = None
        if term:
            sufficient = terminal_sufficient(seq, run, registry, pipeline)
            result.sufficient_evaluations += 1
            r = step_reward(cost, True, sufficient, reward)
        elif run.timed_out:
            r = step_reward(cost, True, False, reward)
        else:
            r = step_reward(cost, False, None, reward)
        total += r
        if log:
            result.trajectory.append(StepLog(run.world.time_step, run.block.id, run.world, run.observation, applied, term, cost, r))
    result.tasks.append(TaskRecord(run.block.id, run.start_world, run.world, run.terminated, run.steps))
    if not run.terminated:
        result.outcome = Outcome(TASK_TIMEOUT, run.block.id)
    result.episode_return = total
    return result


def run_task_model(block: TaskBlock, world: WorldState, pipeline: EnginePipeline, seed: int) -> tuple[WorldState, list[StepLog]]:
    """Run a single fully programmed block directly, bypassing the concept interface."""
    run = TaskRun(block, world, pipeline, seed)
    logs = []
    while not run.done:
        cmd, term = run.decide()
        applied, cost = run.advance(cmd, term)
        logs.append(StepLog(run.world.time_step, block.id, run.world, run.observation, applied, term, cost, 0.0))
    return run.world, logs


def episode_goals_hold(result: EpisodeResult, registry: dict[str, TaskBlock], pipeline: EnginePipeline) -> bool:
    """Success and every task's goal predicate true on its own end state."""
    if not result.outcome.success:
        return False
    runner = subsequent_runner(registry, pipeline, result.seed)
    for rec in result.tasks:
        model = registry[rec.task_id].model
        if isinstance(model.sufficient_goal, GoalPredicate):
            if not goal_holds(model, rec):
                return False
        elif not sufficient_satisfied(model, rec.end, runner, rec.start):
            return False
    return True


def trajectory_return(logs: Sequence[StepLog]) -> float:
    total = 0.0
    for s in logs:
        total += s.reward
    return total
