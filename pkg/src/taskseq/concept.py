"""Concept models: trainable-and-composable task descriptions.

A concept model pairs a *necessary* goal, computable from what a real robot can
observe and checked after every action, with a *sufficient* goal that may read the
full simulation state (or run subsequent tasks) and is checked once, when the policy
signals completion during training.  A fully programmed model is an ordinary task
model: same structure, every parameter known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .engines import Command
from .world import END_EFFECTOR, HINGE, RESTING, ObservableState, WorldState

TARGET = "target"
ENVIRONMENT = "environment"
END_EFFECTOR_ROLE = "end_effector"
ACTOR_ROLES = (TARGET, ENVIRONMENT, END_EFFECTOR_ROLE)

# properties a real robot cannot measure; only these may be randomized
NON_OBSERVABLE = frozenset({"width", "mass", "hinge_radius"})

NECESSARY_EPS = 1e-9


class IncompatibleState(ValueError):
    pass


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    value: Optional[float] = None
    known: bool = True
    randomization_range: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.known and self.value is None:
            raise ValueError(f"known parameter {self.name!r} needs a value")
        if not self.known and self.randomization_range is None:
            raise ValueError(f"unknown parameter {self.name!r} needs a randomization range")
        if self.randomization_range is not None:
            lo, hi = self.randomization_range
            if lo > hi:
                raise ValueError(f"empty range for {self.name!r}")


def _is_range(v) -> bool:
    return isinstance(v, (tuple, list))


@dataclass(frozen=True)
class Actor:
    role: str
    properties: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ActorConfiguration:
    actors: tuple[Actor, ...]

    def __post_init__(self):
        for actor in self.actors:
            if actor.role not in ACTOR_ROLES:
                raise ValueError(f"unknown actor role {actor.role!r}")
            for name, v in actor.properties.items():
                if _is_range(v):
                    if name not in NON_OBSERVABLE:
                        raise ValueError(f"{actor.role}.{name} is observable and cannot be randomized")
                    lo, hi = v
                    if lo > hi:
                        raise ValueError(f"empty range for {actor.role}.{name}")

    def actor(self, role: str) -> Actor:
        for a in self.actors:
            if a.role == role:
                return a
        return Actor(role)

    def overridden(self, overrides: dict[str, dict[str, Any]]) -> "ActorConfiguration":
        actors = {a.role: dict(a.properties) for a in self.actors}
        for role, props in overrides.items():
            actors.setdefault(role, {}).update({k: tuple(v) if _is_range(v) else v for k, v in props.items()})
        return ActorConfiguration(tuple(Actor(r, p) for r, p in actors.items()))


@dataclass(frozen=True)
class ResolvedConfiguration:
    """Actor properties and hidden parameter values drawn for one episode."""

    actors: dict[str, dict[str, Any]]
    parameters: dict[str, float] = field(default_factory=dict)

    def get(self, role: str, name: str, default=None):
        return self.actors.get(role, {}).get(name, default)


StateT = Union[WorldState, ObservableState]


@dataclass(frozen=True)
class GoalPredicate:
    """``cost(state, start)`` is non-negative; the goal holds when ``cost <= epsilon``.

    ``start`` is the same kind of state captured when the task began, for goals
    stated relative to the task's initial state.
    """

    cost: Callable[[Any, Any], float]
    epsilon: float = NECESSARY_EPS

    def evaluate(self, state, start=None) -> float:
        c = float(self.cost(state, start))
        if not math.isfinite(c) or c < 0:
            raise ValueError(f"goal cost must be finite and non-negative, got {c}")
        return c

    def satisfied(self, state, start=None) -> bool:
        return self.evaluate(state, start) <= self.epsilon


@dataclass(frozen=True)
class SubsequentTask:
    """Sufficient goal: the listed tasks, run from the end state, all succeed."""

    tasks: tuple[str, ...]


@dataclass(frozen=True)
class ScrewClass:
    motion: str  # translation | rotation
    dof: int
    contact_transition: str  # make | break | maintain


@dataclass(frozen=True)
class AttachmentPattern:
    """Attachment facts about the target object; ``None`` means "don't care".

    ``support`` is ``resting``, ``lifted`` (no environment attachment) or ``hinged``.
    """

    held: Optional[bool] = None
    support: Optional[str] = None

    @classmethod
    def of(cls, world: WorldState) -> "AttachmentPattern":
        t = world.target
        if t is None:
            return cls(False, None)
        if world.attachment(t, HINGE) is not None:
            support = "hinged"
        elif world.attachment(t, RESTING) is not None:
            support = "resting"
        else:
            support = "lifted"
        return cls(world.attachment(t, END_EFFECTOR) is not None, support)

    def accepts(self, other: "AttachmentPattern") -> bool:
        return all(
            mine is None or theirs == mine
            for mine, theirs in ((self.held, other.held), (self.support, other.support))
        )

    def overlay(self, other: "AttachmentPattern") -> "AttachmentPattern":
        return AttachmentPattern(
            other.held if other.held is not None else self.held,
            other.support if other.support is not None else self.support,
        )

    def describe(self) -> str:
        parts = []
        if self.held is not None:
            parts.append("end-effector attachment" if self.held else "no end-effector attachment")
        if self.support is not None:
            parts.append(f"target {self.support}")
        return " and ".join(parts) or "anything"


@dataclass
class StepContext:
    """What a policy may look at when deciding.  Learned policies read only ``observation``."""

    world: WorldState
    observable: ObservableState
    observation: tuple[float, ...]
    start_world: WorldState
    start_observable: ObservableState


class Policy:
    kind = "programmed"

    def act(self, ctx: StepContext) -> tuple[Command, bool]:
        raise NotImplementedError


@dataclass(frozen=True)
class ConceptModel:
    id: str
    screw_class: ScrewClass
    actor_configs: tuple[ActorConfiguration, ...]
    necessary_goal: GoalPredicate
    sufficient_goal: Union[GoalPredicate, SubsequentTask]
    parameters: tuple[ParameterSpec, ...]
    max_steps: int
    requires: AttachmentPattern
    produces: AttachmentPattern
    policy_factory: Callable[[Optional[Sequence[float]]], Policy]
    build_world: Optional[Callable[[ResolvedConfiguration], WorldState]] = None
    policy_kind: str = "programmed"  # programmed | learned
    family: Optional[str] = None  # parameter family of learned policies
    param_dim: int = 0

    @property
    def trainable(self) -> bool:
        return self.policy_kind == "learned" and self.param_dim > 0

    @property
    def can_start(self) -> bool:
        return self.build_world is not None

    def with_actors(self, overrides: dict[str, dict[str, Any]]) -> "ConceptModel":
        if not overrides:
            return self
        return replace(self, actor_configs=tuple(c.overridden(overrides) for c in self.actor_configs))


def sample_actor_configuration(model: ConceptModel, seed: int) -> ResolvedConfiguration:
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(len(model.actor_configs))) if len(model.actor_configs) > 1 else 0
    config = model.actor_configs[idx]
    actors: dict[str, dict[str, Any]] = {}
    for actor in config.actors:
        props = {}
        for name in sorted(actor.properties):
            v = actor.properties[name]
            if _is_range(v):
                lo, hi = float(v[0]), float(v[1])
                props[name] = lo if lo == hi else float(rng.uniform(lo, hi))
            else:
                props[name] = v
        actors[actor.role] = props
    params = {}
    for p in model.parameters:
        if p.known:
            params[p.name] = float(p.value)
        else:
            lo, hi = p.randomization_range
            params[p.name] = lo if lo == hi else float(rng.uniform(lo, hi))
    return ResolvedConfiguration(actors, params)


def instantiate(
    model: ConceptModel,
    config: Optional[ResolvedConfiguration] = None,
    previous_end_state: Optional[WorldState] = None,
) -> WorldState:
    """Initial world of a task: a fresh world from ``config``, or the previous task's end state."""
    if (config is None) == (previous_end_state is None):
        raise ValueError("give exactly one of config or previous_end_state")
    if previous_end_state is not None:
        found = AttachmentPattern.of(previous_end_state)
        if not model.requires.accepts(found):
            raise IncompatibleState(
                f"{model.id} requires {model.requires.describe()}, found {found.describe()}"
            )
        return previous_end_state
    if model.build_world is None:
        raise IncompatibleState(f"{model.id} cannot start from an actor configuration")
    world = model.build_world(config)
    world.validate()
    return world


def necessary_cost(model: ConceptModel, obs_state: ObservableState, start: Optional[ObservableState] = None) -> float:
    return model.necessary_goal.evaluate(obs_state, start)


def sufficient_satisfied(
    model: ConceptModel,
    world: WorldState,
    runner: Callable[[Sequence[str], WorldState], bool],
    start: Optional[WorldState] = None,
    subsequent: Optional[Sequence[str]] = None,
) -> bool:
    """Evaluate the sufficient goal once.

    The subsequent-task form runs ``subsequent`` (or the model's own list) through
    ``runner`` starting from ``world``; any runner failure counts as unsatisfied.
    """
    goal = model.sufficient_goal
    if isinstance(goal, GoalPredicate):
        return goal.satisfied(world, start)
    tasks = tuple(subsequent) if subsequent else goal.tasks
    try:
        return bool(runner(tasks, world))
    except Exception:
        return False
