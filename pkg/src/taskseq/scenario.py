"""Scenario files: strict parsing, validation diagnostics, canonical serialization.

A scenario is a JSON document with plain decimal reals, e.g.::

    {
      "version": 1,
      "seed": 7,
      "tasks": [{"id": "grasp", "model": "grasp", "params": {"policy": "policy.params"}},
                {"id": "pick", "model": "pick", "params": {}}],
      "sequence": ["grasp", "pick"],
      "mode": "execute"
    }
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .concept import ACTOR_ROLES, AttachmentPattern, ConceptModel
from .engines import KinematicsEngine, FeatureEngine, EnginePipeline, EngineRole, PhysicsEngine, PostProcessEngine
from .learning import TrainConfig
from .sequencer import RewardConfig, TaskBlock, TaskSequence
from .tasks import MODELS
from .wire import DEFAULT_TIMEOUT, RemoteEngine, hexfloat, parse_endpoint, unhex
from .world import DEFAULT_DISTANCE_SIGMA

VERSION = 1
MODES = ("execute", "train")
BACKENDS = ("local", "remote")
PARAMS_FORMAT = 1


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column


class ScenarioError(ValueError):
    """Scenario is well-formed but cannot be built (see :func:`validate_scenario`)."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TaskDef:
    id: str
    model: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EngineDef:
    backend: str = "local"
    endpoint: Optional[str] = None


@dataclass(frozen=True)
class OutputPaths:
    trajectory: str = "trajectory.log"
    metrics: str = "metrics.log"
    params: str = "policy.params"


@dataclass(frozen=True)
class Scenario:
    tasks: tuple[TaskDef, ...]
    sequence: tuple[str, ...]
    version: int = VERSION
    seed: int = 0
    mode: str = "execute"
    train_task: Optional[str] = None
    actors: dict[str, dict[str, Any]] = field(default_factory=dict)
    engines: dict[str, EngineDef] = field(default_factory=dict)
    reward: RewardConfig = RewardConfig()
    train: TrainConfig = TrainConfig()
    distance_noise: float = DEFAULT_DISTANCE_SIGMA
    output: OutputPaths = OutputPaths()
    base_dir: Path = field(default=Path("."), compare=False)

    def task(self, task_id: str) -> TaskDef:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    @property
    def train_index(self) -> Optional[int]:
        return self.sequence.index(self.train_task) if self.mode == "train" else None

    def task_sequence(self) -> TaskSequence:
        return TaskSequence(self.sequence, self.train_index)


# parsing


def _position(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    col = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return line, col


def _locate(text: str, key: str, value: Optional[str] = None, nth: int = 0) -> tuple[int, int]:
    """Best-effort position of ``"key"`` (optionally followed by ``: "value"``) in the source."""
    pat = re.escape(json.dumps(key)) + (r"\s*:\s*" + re.escape(json.dumps(value)) if value is not None else "")
    hits = list(re.finditer(pat, text))
    if not hits:
        return 1, 1
    return _position(text, hits[min(nth, len(hits) - 1)].start())


class _Reader:
    def __init__(self, text: str):
        self.text = text

    def fail(self, message: str, key: str, value: Optional[str] = None, nth: int = 0):
        raise ParseError(message, *_locate(self.text, key, value, nth))

    def obj(self, v, where: str, allowed: set[str], key: str) -> dict:
        if not isinstance(v, dict):
            self.fail(f"{where} must be an object", key)
        for k in v:
            if k not in allowed:
                self.fail(f"unknown field {k!r} in {where}", k)
        return v

    def integer(self, v, name: str) -> int:
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(f"field {name!r} must be an integer", name.rsplit(".", 1)[-1])
        return v

    def real(self, v, name: str) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(f"field {name!r} must be a finite number", name.rsplit(".", 1)[-1])
        return float(v)

    def string(self, v, name: str) -> str:
        if not isinstance(v, str) or not v:
            self.fail(f"field {name!r} must be a non-empty string", name.rsplit(".", 1)[-1])
        return v


def _no_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ValueError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


TOP_FIELDS = {
    "version", "seed", "actors", "tasks", "sequence", "mode", "train_task",
    "engines", "reward", "train", "distance_noise", "output",
}
REWARD_FIELDS = {"alpha": "alpha", "step_cost": "step_cost", "bonus": "bonus", "penalty": "penalty"}
TRAIN_INT = {"population", "iterations", "episodes_per_candidate", "seed"}
TRAIN_REAL = {"elite_fraction", "init_sigma", "sigma_floor"}
TRAIN_BOOL = {"keep_elites"}


def parse_scenario(text: str, base_dir: Path | str = ".") -> Scenario:
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None
    except ValueError as exc:
        key = str(exc).split("'")[1] if "'" in str(exc) else ""
        raise ParseError(str(exc), *_locate(text, key, nth=1)) from None
    r = _Reader(text)
    if not isinstance(raw, dict):
        raise ParseError("scenario must be an object")
    r.obj(raw, "scenario", TOP_FIELDS, "")
    for required in ("tasks", "sequence"):
        if required not in raw:
            raise ParseError(f"missing field {required!r}")
    version = r.integer(raw.get("version", VERSION), "version")
    if version != VERSION:
        r.fail(f"unsupported version {version}", "version")
    seed = r.integer(raw.get("seed", 0), "seed")

    actors = {}
    for role, props in r.obj(raw.get("actors", {}), "actors", set(ACTOR_ROLES), "actors").items():
        r.obj(props, f"actors.{role}", set(props) if isinstance(props, dict) else set(), role)
        clean = {}
        for name, v in props.items():
            if isinstance(v, list):
                if len(v) != 2:
                    r.fail(f"range actors.{role}.{name} must be [lo, hi]", name)
                clean[name] = [r.real(v[0], f"actors.{role}.{name}"), r.real(v[1], f"actors.{role}.{name}")]
            elif isinstance(v, str):
                clean[name] = v
            else:
                clean[name] = r.real(v, f"actors.{role}.{name}")
        actors[role] = clean

    if not isinstance(raw["tasks"], list):
        r.fail("field 'tasks' must be a list", "tasks")
    tasks, seen = [], {}
    for t in raw["tasks"]:
        r.obj(t, "task", {"id", "model", "params"}, "tasks")
        if "id" not in t or "model" not in t:
            r.fail("task needs 'id' and 'model'", "tasks")
        tid = r.string(t["id"], "id")
        if tid in seen:
            r.fail(f"duplicate task id {tid!r}", "id", tid, nth=1)
        seen[tid] = True
        params = t.get("params", {})
        if not isinstance(params, dict):
            r.fail(f"params of task {tid!r} must be an object", "params")
        tasks.append(TaskDef(tid, r.string(t["model"], "model"), params))

    if not isinstance(raw["sequence"], list):
        r.fail("field 'sequence' must be a list", "sequence")
    sequence = tuple(r.string(s, "sequence") for s in raw["sequence"])
    for s in sequence:
        if s not in seen:
            r.fail(f"sequence references undefined task {s!r}", "sequence")

    mode = raw.get("mode", "execute")
    if mode not in MODES:
        r.fail(f"field 'mode' must be one of {MODES}", "mode")
    train_task = raw.get("train_task")
    if mode == "train":
        if train_task is None:
            r.fail("train mode needs field 'train_task'", "mode")
        r.string(train_task, "train_task")
        if train_task not in sequence:
            r.fail(f"train_task {train_task!r} is not in the sequence", "train_task")
    elif train_task is not None:
        r.fail("field 'train_task' is only allowed in train mode", "train_task")

    engines = {}
    for role, spec in r.obj(raw.get("engines", {}), "engines", {e.label for e in EngineRole}, "engines").items():
        r.obj(spec, f"engines.{role}", {"backend", "endpoint"}, role)
        backend = spec.get("backend", "local")
        if backend not in BACKENDS:
            r.fail(f"engines.{role}.backend must be one of {BACKENDS}", "backend")
        endpoint = spec.get("endpoint")
        if backend == "remote":
            r.string(endpoint, f"engines.{role}.endpoint")
        elif endpoint is not None:
            r.fail(f"engines.{role}.endpoint given for a local backend", "endpoint")
        engines[role] = EngineDef(backend, endpoint)

    reward_raw = r.obj(raw.get("reward", {}), "reward", set(REWARD_FIELDS), "reward")
    reward = RewardConfig(**{k: r.real(v, f"reward.{k}") for k, v in reward_raw.items()})

    train_raw = r.obj(raw.get("train", {}), "train", TRAIN_INT | TRAIN_REAL | TRAIN_BOOL, "train")
    kw: dict[str, Any] = {}
    for k, v in train_raw.items():
        if k in TRAIN_INT:
            kw[k] = r.integer(v, f"train.{k}")
        elif k in TRAIN_REAL:
            kw[k] = r.real(v, f"train.{k}")
        else:
            if not isinstance(v, bool):
                r.fail(f"field 'train.{k}' must be true or false", k)
            kw[k] = v
    kw.setdefault("seed", seed)
    try:
        train = TrainConfig(**kw)
    except ValueError as exc:
        r.fail(f"train: {exc}", "train")

    noise = r.real(raw.get("distance_noise", DEFAULT_DISTANCE_SIGMA), "distance_noise")
    if noise < 0:
        r.fail("field 'distance_noise' must be non-negative", "distance_noise")
    out_raw = r.obj(raw.get("output", {}), "output", {f.name for f in fields(OutputPaths)}, "output")
    output = OutputPaths(**{k: r.string(v, f"output.{k}") for k, v in out_raw.items()})

    return Scenario(
        tasks=tuple(tasks),
        sequence=sequence,
        version=version,
        seed=seed,
        mode=mode,
        train_task=train_task,
        actors=actors,
        engines=engines,
        reward=reward,
        train=train,
        distance_noise=noise,
        output=output,
        base_dir=Path(base_dir),
    )


def load_scenario(path: Path | str) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


def serialize_scenario(s: Scenario) -> str:
    """Canonical text: every field present, fixed order, two-space indent, trailing newline."""
    doc: dict[str, Any] = {
        "version": s.version,
        "seed": s.seed,
        "actors": {role: dict(props) for role, props in s.actors.items()},
        "tasks": [{"id": t.id, "model": t.model, "params": t.params} for t in s.tasks],
        "sequence": list(s.sequence),
        "mode": s.mode,
    }
    if s.train_task is not None:
        doc["train_task"] = s.train_task
    doc["engines"] = {
        role: ({"backend": e.backend, "endpoint": e.endpoint} if e.endpoint else {"backend": e.backend})
        for role, e in s.engines.items()
    }
    doc["reward"] = {k: getattr(s.reward, k) for k in REWARD_FIELDS}
    doc["train"] = {f.name: getattr(s.train, f.name) for f in fields(TrainConfig)}
    doc["distance_noise"] = s.distance_noise
    doc["output"] = {f.name: getattr(s.output, f.name) for f in fields(OutputPaths)}
    return json.dumps(doc, indent=2) + "\n"


# policy parameter files


def write_params(path: Path | str, family: str, params) -> bytes:
    doc = {"format": PARAMS_FORMAT, "family": family, "dim": len(params), "params": [hexfloat(float(p)) for p in params]}
    data = (json.dumps(doc, sort_keys=True) + "\n").encode()
    Path(path).write_bytes(data)
    return data


def read_params(path: Path | str, family: Optional[str] = None, dim: Optional[int] = None) -> tuple[float, ...]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{path}: unsupported params format {doc.get('format')!r}")
    if family is not None and doc.get("family") != family:
        raise ValueError(f"{path}: policy family {doc.get('family')!r} does not match {family!r}")
    params = tuple(unhex(p) for p in doc["params"])
    if len(params) != doc.get("dim") or (dim is not None and len(params) != dim):
        raise ValueError(f"{path}: expected {dim} parameters, found {len(params)}")
    return params


# validation and construction


def _policy_path(s: Scenario, t: TaskDef) -> Optional[Path]:
    p = t.params.get("policy")
    return None if p is None else (s.base_dir / p)


def _model(s: Scenario, t: TaskDef) -> ConceptModel:
    factory = MODELS[t.model]
    params = {k: v for k, v in t.params.items() if k != "policy"}
    model = factory(params)
    return model.with_actors(s.actors) if model.can_start else model


def validate_scenario(s: Scenario, models=None) -> list[str]:
    models = MODELS if models is None else models
    diags: list[str] = []
    built: dict[str, ConceptModel] = {}
    for t in s.tasks:
        if t.model not in models:
            diags.append(f"task {t.id!r}: unknown model {t.model!r} (known: {', '.join(sorted(models))})")
            continue
        try:
            built[t.id] = _model(s, t)
        except (ValueError, TypeError, KeyError) as exc:
            diags.append(f"task {t.id!r}: bad parameters: {exc}")
            continue
        model = built[t.id]
        needs_policy = model.trainable and not (s.mode == "train" and t.id == s.train_task)
        path = _policy_path(s, t)
        if needs_policy:
            if path is None:
                diags.append(f"task {t.id!r}: learned policy needs a 'policy' params file")
            else:
                try:
                    read_params(path, model.family, model.param_dim)
                except (OSError, ValueError, KeyError) as exc:
                    diags.append(f"task {t.id!r}: cannot load policy: {exc}")
    if s.mode == "train" and s.train_task in built and not built[s.train_task].trainable:
        diags.append(f"train_task {s.train_task!r} has no trainable parameters")

    # attachment-pattern compatibility along the sequence
    state: Optional[AttachmentPattern] = None
    prev = None
    for tid in s.sequence:
        model = built.get(tid)
        if model is None:
            state, prev = None, tid
            continue
        if prev is None:
            if not model.can_start:
                diags.append(f"{tid} requires {model.requires.describe()}")
            else:
                from .sequencer import episode_world

                try:
                    state = AttachmentPattern.of(episode_world(model, s.seed))
                except (ValueError, KeyError) as exc:
                    diags.append(f"task {tid!r}: cannot build initial world: {exc}")
        elif state is not None and not model.requires.accepts(state):
            diags.append(f"{tid} requires {model.requires.describe()}, but {prev} leaves {state.describe()}")
        state = model.produces if state is None else state.overlay(model.produces)
        prev = tid

    for role, e in s.engines.items():
        if e.backend == "remote":
            try:
                parse_endpoint(e.endpoint)
            except ValueError as exc:
                diags.append(f"engines.{role}: {exc}")
    return diags


def build_registry(s: Scenario) -> dict[str, TaskBlock]:
    diags = validate_scenario(s)
    if diags:
        raise ScenarioError(diags)
    registry = {}
    for t in s.tasks:
        model = _model(s, t)
        params = None
        path = _policy_path(s, t)
        if model.trainable and path is not None and not (s.mode == "train" and t.id == s.train_task):
            params = read_params(path, model.family, model.param_dim)
        registry[t.id] = TaskBlock(t.id, model, params)
    return registry


LOCAL = {
    EngineRole.KINEMATICS: lambda s: KinematicsEngine(),
    EngineRole.PHYSICS: lambda s: PhysicsEngine(),
    EngineRole.FEATURE: lambda s: FeatureEngine(),
    EngineRole.POSTPROCESS: lambda s: PostProcessEngine(s.distance_noise),
}


def build_pipeline(s: Scenario, timeout: float = DEFAULT_TIMEOUT) -> EnginePipeline:
    engines = []
    for role in EngineRole:
        spec = s.engines.get(role.label, EngineDef())
        if spec.backend == "remote":
            engines.append(RemoteEngine(role, spec.endpoint, timeout))
        else:
            engines.append(LOCAL[role](s))
    return EnginePipeline(engines)


@dataclass
class PipelineFactory:
    """Picklable local-pipeline builder for trainer workers."""

    distance_noise: float

    def __call__(self) -> EnginePipeline:
        return EnginePipeline.local(self.distance_noise)


def with_seed(s: Scenario, seed: Optional[int]) -> Scenario:
    if seed is None:
        return s
    return replace(s, seed=seed, train=replace(s.train, seed=seed))
