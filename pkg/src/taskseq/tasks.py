"""Concrete concept models: grasp, pick, bring, place, release and door-open."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .concept import (
    ENVIRONMENT,
    END_EFFECTOR_ROLE,
    TARGET,
    Actor,
    ActorConfiguration,
    AttachmentPattern,
    ConceptModel,
    GoalPredicate,
    ParameterSpec,
    Policy,
    ResolvedConfiguration,
    ScrewClass,
    StepContext,
    SubsequentTask,
)
from .engines import (
    DEFAULT_LIMITS,
    F_STRESS_MAX,
    Command,
    ZERO_COMMAND,
    analytic_ik,
    door_angle,
    grip_force,
)
from .world import (
    OBS_DIM,
    ObjectState,
    ObservableState,
    Pose2,
    Surface,
    WorldState,
    hinge,
    held,
    relative_pose,
    resting,
    wrap_angle,
)

GRASP_FAMILY = "grasp-linear-6x4"
GRASP_DIM = OBS_DIM * 4

EE_START = (1.5, 0.0)
BIN = Surface(1.8, -0.5, 0.15, -0.2)  # trash bin, rim below the table top
HINGE_CENTER = (1.0, 1.0)


class IllConditioned(ValueError):
    pass


# world builders


def table_world(cfg: ResolvedConfiguration) -> WorldState:
    """End-effector at the start pose, target resting on the table straight ahead."""
    ap_max = float(cfg.get(END_EFFECTOR_ROLE, "aperture_max", 0.15))
    ex = float(cfg.get(END_EFFECTOR_ROLE, "x", EE_START[0]))
    ey = float(cfg.get(END_EFFECTOR_ROLE, "y", EE_START[1]))
    ee = Pose2(ex, ey, 0.0)
    dist = float(cfg.get(TARGET, "distance", 0.3))
    lateral = float(cfg.get(TARGET, "lateral", 0.0))
    target = ObjectState(
        pose=Pose2(ex + dist, ey + lateral, 0.0),
        height=0.0,
        width=float(cfg.get(TARGET, "width", 0.08)),
        mass=float(cfg.get(TARGET, "mass", 0.2)),
    )
    surfaces = {
        "bin": Surface(
            float(cfg.get(ENVIRONMENT, "bin_x", BIN.x)),
            float(cfg.get(ENVIRONMENT, "bin_y", BIN.y)),
            float(cfg.get(ENVIRONMENT, "bin_radius", BIN.radius)),
            float(cfg.get(ENVIRONMENT, "bin_z", BIN.z)),
        )
    }
    return WorldState(
        joints=analytic_ik(ee),
        ee=ee,
        aperture=ap_max,
        aperture_max=ap_max,
        objects={"target": target},
        surfaces=surfaces,
        attachments=(resting("target"),),
        target="target",
    )


def door_world(cfg: ResolvedConfiguration) -> WorldState:
    """End-effector holding a door handle hanging below the hinge; approach axis points at the hinge."""
    r = float(cfg.get(ENVIRONMENT, "hinge_radius", 0.7))
    cx = float(cfg.get(ENVIRONMENT, "hinge_x", HINGE_CENTER[0]))
    cy = float(cfg.get(ENVIRONMENT, "hinge_y", HINGE_CENTER[1]))
    ap_max = float(cfg.get(END_EFFECTOR_ROLE, "aperture_max", 0.15))
    width = float(cfg.get(TARGET, "width", 0.03))
    closed = -math.pi / 2
    handle = Pose2(cx + r * math.cos(closed), cy + r * math.sin(closed), 0.0)
    ee = Pose2(handle.x, handle.y, math.pi / 2)
    aperture = min(ap_max, max(0.0, width - 0.01))
    force = grip_force(width, aperture)
    return WorldState(
        joints=analytic_ik(ee),
        ee=ee,
        aperture=aperture,
        aperture_max=ap_max,
        objects={"door": ObjectState(handle, 0.0, width, float(cfg.get(TARGET, "mass", 1.0)))},
        attachments=(
            hinge("door", Pose2(cx, cy, closed), r),
            held("door", relative_pose(ee, handle), 0.0),
        ),
        jaw_contacts=(True, True),
        jaw_torques=(force / 2, force / 2),
        target="door",
    )


# helpers reading the full world


def _target(world: WorldState) -> ObjectState:
    return world.objects[world.target]


def lifted_amount(world: WorldState) -> float:
    obj = _target(world)
    _, sz = world.support_z(obj.pose.x, obj.pose.y)
    return obj.height - sz


def _contact_cost(obs: ObservableState, start=None) -> float:
    return 0.0 if all(obs.jaw_contacts) else 1.0


# grasp (learned)


# Observation and action units, so that weights of order one are meaningful.  Lateral
# offset is read in centimetres (the grasp range is 2 cm) and commanded in 2 mm units:
# the target starts on the approach axis, so sideways motion is only ever a correction.
OBS_SCALE = (0.1, 0.01, 0.1, 5.0, 5.0, 10.0)
ACT_SCALE = (DEFAULT_LIMITS.translation, 0.002, DEFAULT_LIMITS.aperture, 1.0)


def grasp_act(params: Sequence[float], obs: Sequence[float]) -> tuple[Command, bool]:
    """Linear map observation -> (advance, lateral, close, terminate-logit), clamped to the command limits."""
    out = [0.0, 0.0, 0.0, 0.0]
    for i in range(OBS_DIM):
        o = obs[i] / OBS_SCALE[i]
        if o != 0.0:
            row = 4 * i
            out[0] += params[row] * o
            out[1] += params[row + 1] * o
            out[2] += params[row + 2] * o
            out[3] += params[row + 3] * o
    cmd = Command(dx=out[0] * ACT_SCALE[0], dy=out[1] * ACT_SCALE[1], aperture_delta=out[2] * ACT_SCALE[2])
    return cmd.clamped(DEFAULT_LIMITS), out[3] > 0.0


class LinearGraspPolicy(Policy):
    kind = "learned"

    def __init__(self, params: Sequence[float]):
        params = [float(p) for p in params]
        if len(params) != GRASP_DIM:
            raise ValueError(f"grasp policy needs {GRASP_DIM} parameters, got {len(params)}")
        if not all(math.isfinite(p) for p in params):
            raise ValueError("grasp parameters must be finite")
        self.params = params

    def act(self, ctx: StepContext) -> tuple[Command, bool]:
        return grasp_act(self.params, ctx.observation)


def grasp_necessary(obs: ObservableState, start=None) -> float:
    return abs(obs.estimated_target_distance) + _contact_cost(obs)


def handbuilt_grasp_params() -> list[float]:
    """Reference weights: advance toward the target, close once there, stop at a width-proportional grip."""
    w = np.zeros((OBS_DIM, 4))
    w[0, 0] = 1.0  # advance with estimated distance
    w[1, 1] = 2.5  # cancel lateral offset
    w[0, 2] = 2.0  # keep open while far
    w[2, 2] = -1.0  # close towards zero aperture
    w[3, 2] = w[4, 2] = 50.0 / 220.0  # ease off as grip force builds
    w[3, 3] = w[4, 3] = 5.0  # terminate once total jaw force ...
    w[2, 3] = -18.0  # ... exceeds 180 N per metre of aperture
    return [float(v) for v in w.ravel()]


def make_grasp(params: dict[str, Any]) -> ConceptModel:
    def policy_factory(weights=None):
        weights = weights if weights is not None else params.get("weights")
        if weights is None:
            raise ValueError("grasp needs policy parameters (a params file or explicit weights)")
        return LinearGraspPolicy(weights)

    actors = ActorConfiguration(
        (
            Actor(TARGET, {"width": (0.04, 0.12), "mass": 0.2, "distance": 0.3, "lateral": 0.0}),
            Actor(END_EFFECTOR_ROLE, {"aperture_max": 0.15}),
            Actor(ENVIRONMENT, {}),
        )
    )
    return ConceptModel(
        id="grasp",
        screw_class=ScrewClass("translation", 3, "make"),
        actor_configs=(actors,),
        necessary_goal=GoalPredicate(grasp_necessary),
        sufficient_goal=SubsequentTask(("pick",)),
        parameters=(
            ParameterSpec("target_distance", value=0.3),
            ParameterSpec("object_width", known=False, randomization_range=(0.04, 0.12)),
        ),
        max_steps=int(params.get("max_steps", 40)),
        requires=AttachmentPattern(held=False, support="resting"),
        produces=AttachmentPattern(held=True),
        policy_factory=policy_factory,
        build_world=table_world,
        policy_kind="learned",
        family=GRASP_FAMILY,
        param_dim=GRASP_DIM,
    )


# programmed motions


@dataclass(frozen=True)
class ProgrammedMotionSpec:
    kind: str  # pick | bring | place | release
    displacement: tuple[float, float, float] = (0.0, 0.0, 0.0)
    height: float = 0.05
    retreat: float = 0.05
    tolerance: float = 1e-3
    surface: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("pick", "bring", "place", "release"):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if math.hypot(self.displacement[0], self.displacement[1]) > 2.5 or not 0 <= self.height <= 0.5:
            raise ValueError("motion outside the workspace")


class ProgrammedPolicy(Policy):
    """Terminates when the goal predicate holds (or ``abort`` fires); otherwise commands ``motion``."""

    kind = "programmed"

    def __init__(self, spec: ProgrammedMotionSpec, goal: GoalPredicate, motion: Callable, abort=None):
        self.spec = spec
        self.goal = goal
        self.motion = motion
        self.abort = abort

    def act(self, ctx: StepContext) -> tuple[Command, bool]:
        if self.goal.satisfied(ctx.world, ctx.start_world):
            return ZERO_COMMAND, True
        if self.abort is not None and self.abort(ctx.world):
            return ZERO_COMMAND, True
        return self.motion(ctx.world, ctx.start_world, self.spec), False


def pick_goal(spec: ProgrammedMotionSpec) -> GoalPredicate:
    def cost(world: WorldState, start=None) -> float:
        obj = _target(world)
        c = 0.0 if world.is_held(world.target) else 1.0
        c += max(0.0, spec.height - lifted_amount(world))
        return c + (1.0 if obj.crushed else 0.0)

    return GoalPredicate(cost)


def pick_motion(world: WorldState, start, spec: ProgrammedMotionSpec) -> Command:
    return Command(lift_delta=min(DEFAULT_LIMITS.lift, spec.height - lifted_amount(world)))


def pick_act(state: WorldState, spec: ProgrammedMotionSpec) -> tuple[Command, bool]:
    """Lift until the target is ``spec.height`` above its support; give up if nothing is held."""
    if not state.is_held(state.target) or _target(state).crushed:
        return ZERO_COMMAND, True
    if lifted_amount(state) >= spec.height - 1e-9:
        return ZERO_COMMAND, True
    return pick_motion(state, None, spec), False


def _bring_goal_pose(start: Pose2, spec: ProgrammedMotionSpec) -> Pose2:
    dx, dy, dt = spec.displacement
    return Pose2(start.x + dx, start.y + dy, start.theta + dt)


def _pose_gap(a: Pose2, b: Pose2) -> float:
    return math.hypot(a.x - b.x, a.y - b.y) + abs(wrap_angle(a.theta - b.theta))


def bring_goal(spec: ProgrammedMotionSpec) -> GoalPredicate:
    def cost(world: WorldState, start: WorldState) -> float:
        gap = _pose_gap(world.ee, _bring_goal_pose(start.ee, spec))
        return max(0.0, gap - spec.tolerance) + (0.0 if world.is_held(world.target) else 1.0)

    return GoalPredicate(cost)


def bring_motion(world: WorldState, start: WorldState, spec: ProgrammedMotionSpec) -> Command:
    goal = _bring_goal_pose(start.ee, spec)
    ee = world.ee
    wx, wy = goal.x - ee.x, goal.y - ee.y
    c, s = math.cos(ee.theta), math.sin(ee.theta)
    bx, by = c * wx + s * wy, -s * wx + c * wy
    bt = wrap_angle(goal.theta - ee.theta)
    lim = DEFAULT_LIMITS
    # one common scale keeps the path a straight line
    k = max(abs(bx) / lim.translation, abs(by) / lim.translation, abs(bt) / lim.rotation, 1.0)
    return Command(dx=bx / k, dy=by / k, dtheta=bt / k)


def programmed_motion_act(state: WorldState, spec: ProgrammedMotionSpec, start: Optional[WorldState] = None):
    """Command and terminate flag for bring / place / release (pick has :func:`pick_act`)."""
    start = start if start is not None else state
    if spec.kind == "pick":
        return pick_act(state, spec)
    goal = PROGRAMMED[spec.kind][0](spec)
    if goal.satisfied(state, start):
        return ZERO_COMMAND, True
    return PROGRAMMED[spec.kind][1](state, start, spec), False


def place_goal(spec: ProgrammedMotionSpec) -> GoalPredicate:
    def cost(world: WorldState, start=None) -> float:
        rest = world.attachment(world.target, "resting")
        c = 0.0 if world.is_held(world.target) else 1.0
        if rest is None:
            c += 1.0 + max(0.0, lifted_amount(world))
        elif spec.surface is not None and rest.surface != spec.surface:
            c += 1.0
        return c

    return GoalPredicate(cost)


def place_motion(world: WorldState, start, spec: ProgrammedMotionSpec) -> Command:
    return Command(lift_delta=-min(DEFAULT_LIMITS.lift, max(lifted_amount(world), 0.0)))


def _retreat_distance(world: WorldState) -> float:
    p = _target(world).pose
    return math.hypot(p.x - world.ee.x, p.y - world.ee.y)


def release_goal(spec: ProgrammedMotionSpec) -> GoalPredicate:
    def cost(world: WorldState, start=None) -> float:
        obj = _target(world)
        rest = world.attachment(world.target, "resting")
        c = 1.0 if world.is_held(world.target) else 0.0
        c += grip_force(obj.width, world.aperture) if all(world.jaw_contacts) else 0.0
        c += 1.0 if rest is None or (spec.surface is not None and rest.surface != spec.surface) else 0.0
        return c + max(0.0, spec.retreat - _retreat_distance(world) - 1e-9)

    return GoalPredicate(cost)


def release_motion(world: WorldState, start, spec: ProgrammedMotionSpec) -> Command:
    obj = _target(world)
    if world.is_held(world.target) or world.aperture <= obj.width:
        return Command(aperture_delta=DEFAULT_LIMITS.aperture)
    rel = relative_pose(world.ee, obj.pose)
    # back off along the approach axis until the planar distance reaches the retreat
    need = math.sqrt(max(spec.retreat**2 - rel.y**2, 0.0)) - rel.x + 1e-6
    return Command(dx=-min(DEFAULT_LIMITS.translation, max(need, 0.0)))


PROGRAMMED = {
    "pick": (pick_goal, pick_motion),
    "bring": (bring_goal, bring_motion),
    "place": (place_goal, place_motion),
    "release": (release_goal, release_motion),
}


def _bring_necessary(spec):
    def cost(obs: ObservableState, start: ObservableState) -> float:
        return max(0.0, _pose_gap(obs.ee, _bring_goal_pose(start.ee, spec)) - spec.tolerance)

    return cost


def _motion_spec(kind: str, params: dict[str, Any]) -> ProgrammedMotionSpec:
    kw: dict[str, Any] = {"kind": kind}
    if "displacement" in params:
        d = [float(v) for v in params["displacement"]]
        kw["displacement"] = tuple(d + [0.0] * (3 - len(d)))
    for name in ("height", "retreat", "tolerance"):
        if name in params:
            kw[name] = float(params[name])
    if "surface" in params:
        kw["surface"] = str(params["surface"])
    return ProgrammedMotionSpec(**kw)


def _make_programmed(kind, screw, requires, produces, necessary, max_steps):
    def factory(params: dict[str, Any]) -> ConceptModel:
        spec = _motion_spec(kind, params)
        goal = PROGRAMMED[kind][0](spec)
        abort = None
        if kind == "pick":
            abort = lambda w: not w.is_held(w.target) or _target(w).crushed  # noqa: E731

        def policy_factory(weights=None):
            return ProgrammedPolicy(spec, goal, PROGRAMMED[kind][1], abort)

        return ConceptModel(
            id=kind,
            screw_class=screw,
            actor_configs=(ActorConfiguration(()),),
            necessary_goal=GoalPredicate(necessary(spec) if kind == "bring" else necessary),
            sufficient_goal=goal,
            parameters=tuple(
                ParameterSpec(name, value=float(v) if not isinstance(v, tuple) else float(np.linalg.norm(v)))
                for name, v in (("displacement", spec.displacement), ("height", spec.height))
            ),
            max_steps=int(params.get("max_steps", max_steps)),
            requires=requires,
            produces=produces,
            policy_factory=policy_factory,
        )

    return factory


make_pick = _make_programmed(
    "pick",
    ScrewClass("translation", 1, "break"),
    AttachmentPattern(held=True),
    AttachmentPattern(held=True, support="lifted"),
    _contact_cost,
    10,
)
make_bring = _make_programmed(
    "bring",
    ScrewClass("translation", 6, "maintain"),
    AttachmentPattern(held=True, support="lifted"),
    AttachmentPattern(held=True, support="lifted"),
    _bring_necessary,
    40,
)
make_place = _make_programmed(
    "place",
    ScrewClass("translation", 1, "make"),
    AttachmentPattern(held=True, support="lifted"),
    AttachmentPattern(held=True, support="resting"),
    _contact_cost,
    20,
)
make_release = _make_programmed(
    "release",
    ScrewClass("translation", 1, "break"),
    AttachmentPattern(held=True),
    AttachmentPattern(held=False, support="resting"),
    lambda obs, start=None: 1.0 - _contact_cost(obs),
    20,
)


# door opening (parameter-estimating)


def circle_fit(points) -> tuple[tuple[float, float], float]:
    """Algebraic least-squares circle: minimize sum (x^2 + y^2 + D x + E y + F)^2.

    Points are centred and scaled first so the collinearity test is scale-free.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("circle_fit needs at least 3 (x, y) points")
    mean = pts.mean(axis=0)
    centred = pts - mean
    scale = math.sqrt(float((centred**2).sum(axis=1).mean()))
    if scale == 0.0:
        raise IllConditioned("all points coincide")
    u = centred / scale
    a = np.column_stack([u, np.ones(len(u))])
    b = -(u**2).sum(axis=1)
    normal = a.T @ a / len(u)
    if abs(np.linalg.det(normal)) < 1e-12:
        raise IllConditioned("points are collinear")
    d, e, f = np.linalg.solve(normal, a.T @ b / len(u))
    cx, cy = -d / 2, -e / 2
    r2 = cx * cx + cy * cy - f
    if r2 <= 0:
        raise IllConditioned("degenerate fit")
    return (float(cx * scale + mean[0]), float(cy * scale + mean[1])), float(math.sqrt(r2) * scale)


@dataclass(frozen=True)
class DoorEstimatorState:
    samples: tuple[tuple[float, float], ...] = ()
    center_est: Optional[tuple[float, float]] = None
    radius_est: Optional[float] = None
    angle_progress: float = 0.0


@dataclass(frozen=True)
class DoorSettings:
    target_angle: float = math.radians(60.0)
    arc_step: float = 0.02
    direction: int = 1  # +1 opens counter-clockwise
    probe_steps: int = 2


def door_act(
    est: DoorEstimatorState, obs: Sequence[float], ee_pose: Pose2, settings: DoorSettings = DoorSettings()
) -> tuple[Command, bool, DoorEstimatorState]:
    """Refit the hinge circle from the hand path and step along the estimated arc."""
    samples = est.samples + ((ee_pose.x, ee_pose.y),)
    est = replace(est, samples=samples)
    if len(samples) <= settings.probe_steps:
        # probe sideways, perpendicular to the approach axis
        return Command(dy=-settings.direction * settings.arc_step), False, est
    (cx, cy), r = circle_fit(samples)
    first = math.atan2(samples[0][1] - cy, samples[0][0] - cx)
    here = math.atan2(ee_pose.y - cy, ee_pose.x - cx)
    progress = settings.direction * wrap_angle(here - first)
    est = replace(est, center_est=(cx, cy), radius_est=r, angle_progress=progress)
    remaining = settings.target_angle - progress
    if remaining <= 1e-9:
        return ZERO_COMMAND, True, est
    step = min(settings.arc_step / r, remaining)
    nxt = here + settings.direction * step
    wx = cx + r * math.cos(nxt) - ee_pose.x
    wy = cy + r * math.sin(nxt) - ee_pose.y
    c, s = math.cos(ee_pose.theta), math.sin(ee_pose.theta)
    return Command(dx=c * wx + s * wy, dy=-s * wx + c * wy), False, est


class DoorPolicy(Policy):
    kind = "learned"

    def __init__(self, settings: DoorSettings):
        self.settings = settings
        self.est = DoorEstimatorState()

    def act(self, ctx: StepContext) -> tuple[Command, bool]:
        cmd, done, self.est = door_act(self.est, ctx.observation, ctx.observable.ee, self.settings)
        return cmd, done


def door_necessary(obs: ObservableState, start=None) -> float:
    return max(0.0, obs.wrist_force - F_STRESS_MAX)


def make_door_open(params: dict[str, Any]) -> ConceptModel:
    settings = DoorSettings(
        target_angle=math.radians(float(params.get("target_angle_deg", 60.0))),
        arc_step=float(params.get("arc_step", 0.02)),
    )

    def sufficient(world: WorldState, start=None) -> float:
        return abs(door_angle(world, world.target) - settings.target_angle)

    actors = ActorConfiguration(
        (
            Actor(ENVIRONMENT, {"hinge_radius": (0.4, 1.0), "hinge_x": 1.0, "hinge_y": 1.0}),
            Actor(TARGET, {"width": 0.03, "mass": 1.0}),
            Actor(END_EFFECTOR_ROLE, {"aperture_max": 0.15}),
        )
    )
    return ConceptModel(
        id="door_open",
        screw_class=ScrewClass("rotation", 1, "maintain"),
        actor_configs=(actors,),
        necessary_goal=GoalPredicate(door_necessary),
        sufficient_goal=GoalPredicate(sufficient, epsilon=math.radians(2.0)),
        parameters=(
            ParameterSpec("hinge_radius", known=False, randomization_range=(0.4, 1.0)),
            ParameterSpec("target_angle", value=settings.target_angle),
        ),
        max_steps=int(params.get("max_steps", 120)),
        requires=AttachmentPattern(held=True, support="hinged"),
        produces=AttachmentPattern(held=True, support="hinged"),
        policy_factory=lambda weights=None: DoorPolicy(settings),
        build_world=door_world,
        policy_kind="learned",
    )


MODELS: dict[str, Callable[[dict[str, Any]], ConceptModel]] = {
    "grasp": make_grasp,
    "pick": make_pick,
    "bring": make_bring,
    "place": make_place,
    "release": make_release,
    "door_open": make_door_open,
}
