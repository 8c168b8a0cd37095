"""Environment engine pipeline: kinematics -> physics -> feature -> post-process.

Every engine maps a :class:`Frame` to a new frame.  Engines are stateless between
steps, so a frame can be shipped to another process (see :mod:`taskseq.wire`) and
the result is bit-identical to running the engine locally.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Protocol

from .world import (
    END_EFFECTOR,
    HINGE,
    RESTING,
    DEFAULT_DISTANCE_SIGMA,
    MissingTarget,
    ObservableState,
    Pose2,
    WorldState,
    compose_pose,
    derive_seed,
    observable_projection,
    relative_pose,
    resting,
    held,
    wrap_angle,
)

LINKS = (1.0, 1.0, 0.5)
REACH = sum(LINKS)

IK_DAMPING = 0.1
IK_STEP_CAP = 0.2
IK_TOL = 1e-6
IK_MAX_ITER = 200

K_GRIP = 500.0  # N/m
K_CONSTRAINT = 1000.0  # N/m
F_STRESS_MAX = 15.0  # N, wrist stress limit used by the door task
F_CRUSH = 20.0  # N
GRAVITY = 9.81
LIFT_ACCEL = 2.0
FRICTION = 0.5
GRASP_RANGE = 0.02
BREAK_LIFT = 0.01
LEVEL_TOL = 0.005
LAND_TOL = 1e-9


class ConfigurationError(ValueError):
    pass


class Unreachable(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


class EngineError(RuntimeError):
    """An engine failed; ``role`` names the pipeline stage."""

    def __init__(self, role: "EngineRole", cause: BaseException):
        super().__init__(f"{role.label} engine failed: {cause}")
        self.role = role
        self.cause = cause


class EngineRole(enum.IntEnum):
    KINEMATICS = 0
    PHYSICS = 1
    FEATURE = 2
    POSTPROCESS = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "EngineRole":
        try:
            return cls[name.upper().replace("-", "")]
        except KeyError:
            raise ConfigurationError(f"unknown engine role {name!r}") from None


@dataclass(frozen=True)
class CommandLimits:
    translation: float = 0.05
    rotation: float = 0.2
    aperture: float = 0.02
    lift: float = 0.02


DEFAULT_LIMITS = CommandLimits()


def _clip(v: float, lim: float) -> float:
    return -lim if v < -lim else lim if v > lim else v


@dataclass(frozen=True)
class Command:
    """End-effector motion in its own frame plus gripper and lift increments."""

    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0
    aperture_delta: float = 0.0
    lift_delta: float = 0.0

    @property
    def moves_ee(self) -> bool:
        return self.dx != 0.0 or self.dy != 0.0 or self.dtheta != 0.0

    def clamped(self, limits: CommandLimits = DEFAULT_LIMITS) -> "Command":
        return Command(
            _clip(self.dx, limits.translation),
            _clip(self.dy, limits.translation),
            _clip(self.dtheta, limits.rotation),
            _clip(self.aperture_delta, limits.aperture),
            _clip(self.lift_delta, limits.lift),
        )

    def within(self, limits: CommandLimits = DEFAULT_LIMITS) -> bool:
        return self.clamped(limits) == self

    def scaled_motion(self, k: float) -> "Command":
        return replace(self, dx=self.dx * k, dy=self.dy * k, dtheta=self.dtheta * k)


ZERO_COMMAND = Command()


@dataclass(frozen=True)
class VisualFeatures:
    distance: float
    lateral: float


@dataclass(frozen=True)
class Frame:
    """Everything that flows through the pipeline during one step."""

    world: WorldState
    command: Command = ZERO_COMMAND
    seed: int = 0
    features: Optional[VisualFeatures] = None
    observable: Optional[ObservableState] = None
    observation: Optional[tuple[float, ...]] = None


# kinematics


def forward_kinematics(joints) -> Pose2:
    x = y = phi = 0.0
    for q, length in zip(joints, LINKS):
        phi += q
        x += length * math.cos(phi)
        y += length * math.sin(phi)
    return Pose2(x, y, phi)


def _pose_error(q, target: Pose2) -> tuple[float, float, float, list[float], list[float]]:
    # returns position/angle error and the partial sums used for the jacobian
    phis, acc = [], 0.0
    for qi in q:
        acc += qi
        phis.append(acc)
    xs = [LINKS[i] * math.cos(phis[i]) for i in range(3)]
    ys = [LINKS[i] * math.sin(phis[i]) for i in range(3)]
    ex = target.x - sum(xs)
    ey = target.y - sum(ys)
    et = wrap_angle(target.theta - acc)
    return ex, ey, et, xs, ys


def check_reachable(target: Pose2) -> None:
    if math.hypot(target.x, target.y) > REACH + 1e-12:
        raise Unreachable(f"({target.x:.4f}, {target.y:.4f}) is beyond reach {REACH}")
    wx = target.x - LINKS[2] * math.cos(target.theta)
    wy = target.y - LINKS[2] * math.sin(target.theta)
    if math.hypot(wx, wy) > LINKS[0] + LINKS[1] + 1e-12:
        raise Unreachable("pose infeasible: wrist point beyond the first two links")


def inverse_kinematics(target: Pose2, seed_config) -> tuple[float, float, float]:
    """Damped least-squares IK.

    Iterates ``dq = J^T (J J^T + lambda^2 I)^-1 e`` with each joint step capped at
    0.2 rad until position error plus angle error is at most 1e-6.
    """
    check_reachable(target)
    q = [wrap_angle(float(v)) for v in seed_config]
    lam2 = IK_DAMPING * IK_DAMPING
    for _ in range(IK_MAX_ITER + 1):
        ex, ey, et, xs, ys = _pose_error(q, target)
        if math.hypot(ex, ey) + abs(et) <= IK_TOL:
            return (q[0], q[1], q[2])
        # jacobian columns: d(x, y, theta)/dq_j
        jx = [-(ys[0] + ys[1] + ys[2]), -(ys[1] + ys[2]), -ys[2]]
        jy = [xs[0] + xs[1] + xs[2], xs[1] + xs[2], xs[2]]
        a11 = jx[0] * jx[0] + jx[1] * jx[1] + jx[2] * jx[2] + lam2
        a12 = jx[0] * jy[0] + jx[1] * jy[1] + jx[2] * jy[2]
        a13 = jx[0] + jx[1] + jx[2]
        a22 = jy[0] * jy[0] + jy[1] * jy[1] + jy[2] * jy[2] + lam2
        a23 = jy[0] + jy[1] + jy[2]
        a33 = 3.0 + lam2
        v = _solve_sym3(a11, a12, a13, a22, a23, a33, ex, ey, et)
        dq = [jx[j] * v[0] + jy[j] * v[1] + v[2] for j in range(3)]
        peak = max(abs(d) for d in dq)
        if peak > IK_STEP_CAP:
            s = IK_STEP_CAP / peak
            dq = [d * s for d in dq]
        q = [wrap_angle(q[j] + dq[j]) for j in range(3)]
    raise NoConvergence(f"IK did not reach {IK_TOL} in {IK_MAX_ITER} iterations")


def _solve_sym3(a11, a12, a13, a22, a23, a33, b1, b2, b3):
    c11 = a22 * a33 - a23 * a23
    c12 = a13 * a23 - a12 * a33
    c13 = a12 * a23 - a13 * a22
    det = a11 * c11 + a12 * c12 + a13 * c13
    c22 = a11 * a33 - a13 * a13
    c23 = a12 * a13 - a11 * a23
    c33 = a11 * a22 - a12 * a12
    return (
        (c11 * b1 + c12 * b2 + c13 * b3) / det,
        (c12 * b1 + c22 * b2 + c23 * b3) / det,
        (c13 * b1 + c23 * b2 + c33 * b3) / det,
    )


def analytic_ik(target: Pose2, elbow: int = 1) -> tuple[float, float, float]:
    """Closed-form solution, used to seed IK retries and to build initial configurations."""
    check_reachable(target)
    l1, l2, l3 = LINKS
    wx = target.x - l3 * math.cos(target.theta)
    wy = target.y - l3 * math.sin(target.theta)
    c2 = (wx * wx + wy * wy - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    q2 = elbow * math.acos(max(-1.0, min(1.0, c2)))
    q1 = math.atan2(wy, wx) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    q1 = wrap_angle(q1)
    return (q1, wrap_angle(q2), wrap_angle(target.theta - q1 - q2))


def solve_ik(target: Pose2, seed_config) -> tuple[float, float, float]:
    """IK from ``seed_config``, retrying from both elbow branches on non-convergence."""
    try:
        return inverse_kinematics(target, seed_config)
    except NoConvergence:
        pass
    for elbow in (1, -1):
        try:
            return inverse_kinematics(target, analytic_ik(target, elbow))
        except NoConvergence:
            continue
    raise NoConvergence("IK failed from the given seed and both elbow branches")


# physics


def grip_force(object_width: float, aperture: float) -> float:
    if aperture < object_width:
        return K_GRIP * (object_width - aperture)
    return 0.0


def slip_threshold(mass: float, accel: float = LIFT_ACCEL) -> float:
    """Minimum grip force that keeps an object of ``mass`` from slipping."""
    return mass * (GRAVITY + accel) / FRICTION


def project_to_circle(x: float, y: float, cx: float, cy: float, r: float) -> tuple[float, float]:
    dx, dy = x - cx, y - cy
    n = math.hypot(dx, dy)
    if n == 0.0:
        return cx + r, cy
    return cx + r * dx / n, cy + r * dy / n


def door_angle(world: WorldState, child: str) -> float:
    h = world.attachment(child, HINGE)
    if h is None:
        raise ValueError(f"{child!r} is not hinged")
    p = world.objects[child].pose
    return wrap_angle(math.atan2(p.y - h.anchor.y, p.x - h.anchor.x) - h.anchor.theta)


def physics_step(world: WorldState, command: Command) -> WorldState:
    """Quasi-static attachment physics for one step."""
    ee = compose_pose(world.ee, Pose2(command.dx, command.dy, command.dtheta))
    aperture = min(max(world.aperture + command.aperture_delta, 0.0), world.aperture_max)
    objects = dict(world.objects)
    attachments = list(world.attachments)

    def attached(child, kind):
        for a in attachments:
            if a.child == child and a.kind == kind:
                return a
        return None

    def drop(child):
        # object falls onto whatever surface is below it and becomes resting there
        obj = objects[child]
        sid, sz = world.support_z(obj.pose.x, obj.pose.y)
        objects[child] = replace(obj, height=sz)
        attachments[:] = [a for a in attachments if not (a.child == child and a.kind != HINGE)]
        attachments.append(resting(child, sid))

    # palm stop: the end-effector cannot pass through a free object in its jaw corridor
    for oid in sorted(objects):
        if attached(oid, END_EFFECTOR) is not None:
            continue
        obj = objects[oid]
        if abs(world.ee_z - obj.height) > LEVEL_TOL:
            continue
        before = relative_pose(world.ee, obj.pose)
        after = relative_pose(ee, obj.pose)
        if before.x >= 0.0 and after.x < 0.0 and abs(after.y) <= world.aperture_max / 2:
            ee = compose_pose(ee, Pose2(after.x, 0.0, 0.0))

    # rigid environment constraints project the end-effector back onto the hinge circle
    wrist_force = 0.0
    for a in sorted((a for a in attachments if a.kind == END_EFFECTOR), key=lambda a: a.child):
        h = attached(a.child, HINGE)
        if h is None:
            continue
        handle = compose_pose(ee, a.offset)
        px, py = project_to_circle(handle.x, handle.y, h.anchor.x, h.anchor.y, h.radius)
        rx, ry = handle.x - px, handle.y - py
        wrist_force += K_CONSTRAINT * math.hypot(rx, ry)
        ee = Pose2(ee.x - rx, ee.y - ry, ee.theta)

    # opening past the object width releases it
    for a in [a for a in attachments if a.kind == END_EFFECTOR]:
        if aperture > objects[a.child].width:
            attachments.remove(a)
            if attached(a.child, HINGE) is None and attached(a.child, RESTING) is None:
                drop(a.child)

    # held objects follow the end-effector in the plane
    for a in attachments:
        if a.kind == END_EFFECTOR:
            obj = objects[a.child]
            objects[a.child] = replace(obj, pose=compose_pose(ee, a.offset))

    # lift / lower with slip checks
    ee_z = world.ee_z
    carried = [a for a in attachments if a.kind == END_EFFECTOR and attached(a.child, HINGE) is None]
    hinged = any(a.kind == END_EFFECTOR and attached(a.child, HINGE) for a in attachments)
    lift = 0.0 if hinged else command.lift_delta
    if lift != 0.0:
        ee_z = max(0.0, ee_z + lift)
        for a in carried:
            p = objects[a.child].pose
            _, sz = world.support_z(p.x, p.y)
            if ee_z - a.z_offset < sz:
                ee_z = sz + a.z_offset
    for a in sorted(carried, key=lambda a: a.child):
        obj = objects[a.child]
        sid, sz = world.support_z(obj.pose.x, obj.pose.y)
        z = ee_z - a.z_offset
        force = grip_force(obj.width, aperture)
        need = slip_threshold(obj.mass, LIFT_ACCEL if lift > 0 else 0.0)
        rest = attached(a.child, RESTING)
        if rest is not None:
            if z - sz > BREAK_LIFT:
                if force >= need:
                    attachments.remove(rest)
                    objects[a.child] = replace(obj, height=z)
                else:
                    attachments.remove(a)
                    objects[a.child] = replace(obj, height=sz)
            else:
                objects[a.child] = replace(obj, height=max(z, sz))
        elif z <= sz + LAND_TOL:
            objects[a.child] = replace(obj, height=sz)
            attachments.append(resting(a.child, sid))
        elif force < need:
            attachments.remove(a)
            drop(a.child)
        else:
            objects[a.child] = replace(obj, height=z)

    # jaw contact with the held object, else the nearest free object in range
    contact = None
    holding = sorted(a.child for a in attachments if a.kind == END_EFFECTOR)
    if holding:
        contact = holding[0]
    else:
        best = None
        for oid in sorted(objects):
            obj = objects[oid]
            if aperture > obj.width or abs(ee_z - obj.height) > LEVEL_TOL:
                continue
            d = math.hypot(obj.pose.x - ee.x, obj.pose.y - ee.y)
            if d <= GRASP_RANGE and (best is None or d < best[0]):
                best = (d, oid)
        if best is not None:
            contact = best[1]
            obj = objects[contact]
            attachments.append(held(contact, relative_pose(ee, obj.pose), ee_z - obj.height))

    if contact is None:
        jaw_contacts, jaw_torques = (False, False), (0.0, 0.0)
    else:
        obj = objects[contact]
        force = grip_force(obj.width, aperture)
        jaw_contacts = (True, True)
        jaw_torques = (force / 2.0, force / 2.0)
        if force > F_CRUSH and not obj.crushed:
            objects[contact] = replace(obj, crushed=True)

    return replace(
        world,
        ee=ee,
        ee_z=ee_z,
        aperture=aperture,
        objects=objects,
        attachments=tuple(attachments),
        wrist_force=wrist_force,
        jaw_contacts=jaw_contacts,
        jaw_torques=jaw_torques,
    )


# features and post-processing


def feature_extract(world: WorldState) -> VisualFeatures:
    if world.target is None or world.target not in world.objects:
        raise MissingTarget("world has no designated target object")
    rel = relative_pose(world.ee, world.objects[world.target].pose)
    return VisualFeatures(math.hypot(rel.x, rel.y), rel.y)


def postprocess(features: VisualFeatures, observable: ObservableState) -> tuple[float, ...]:
    return (
        float(observable.estimated_target_distance),
        float(features.lateral),
        float(observable.aperture),
        float(observable.jaw_torques[0]),
        float(observable.jaw_torques[1]),
        float(observable.wrist_force),
    )


# engines


class Engine(Protocol):
    role: EngineRole

    def step(self, frame: Frame) -> Frame: ...


class KinematicsEngine:
    """Resolves the commanded end-effector pose to joints, shrinking the motion if IK fails."""

    role = EngineRole.KINEMATICS

    def __init__(self, limits: CommandLimits = DEFAULT_LIMITS):
        self.limits = limits

    def step(self, frame: Frame) -> Frame:
        command = frame.command.clamped(self.limits)
        world = frame.world
        if not command.moves_ee:
            return replace(frame, command=command)
        for k in (1.0, 0.5, 0.25, 0.125):
            trial = command.scaled_motion(k)
            target = compose_pose(world.ee, Pose2(trial.dx, trial.dy, trial.dtheta))
            try:
                q = solve_ik(target, world.joints)
            except (Unreachable, NoConvergence):
                continue
            return replace(frame, world=replace(world, joints=q), command=trial)
        return replace(frame, command=command.scaled_motion(0.0))


class PhysicsEngine:
    role = EngineRole.PHYSICS

    def step(self, frame: Frame) -> Frame:
        return replace(frame, world=physics_step(frame.world, frame.command))


class FeatureEngine:
    role = EngineRole.FEATURE

    def step(self, frame: Frame) -> Frame:
        return replace(frame, features=feature_extract(frame.world))


class PostProcessEngine:
    """Adds distance-estimate noise, seeded by (episode seed, time step), and packs the observation."""

    role = EngineRole.POSTPROCESS

    def __init__(self, distance_sigma: float = DEFAULT_DISTANCE_SIGMA):
        self.distance_sigma = distance_sigma

    def step(self, frame: Frame) -> Frame:
        noise_seed = derive_seed(frame.seed, frame.world.time_step)
        obs_state = observable_projection(frame.world, noise_seed, self.distance_sigma)
        return replace(frame, observable=obs_state, observation=postprocess(frame.features, obs_state))


LOCAL_ENGINES = {
    EngineRole.KINEMATICS: KinematicsEngine,
    EngineRole.PHYSICS: PhysicsEngine,
    EngineRole.FEATURE: FeatureEngine,
    EngineRole.POSTPROCESS: PostProcessEngine,
}


class EnginePipeline:
    def __init__(self, engines):
        engines = list(engines)
        roles = [e.role for e in engines]
        if roles != sorted(set(roles)) or len(roles) != len(EngineRole):
            raise ConfigurationError(
                "pipeline needs exactly one engine per role in order "
                f"kinematics < physics < feature < postprocess, got {[r.label for r in roles]}"
            )
        self.engines = engines

    @classmethod
    def local(cls, distance_sigma: float = DEFAULT_DISTANCE_SIGMA) -> "EnginePipeline":
        return cls([KinematicsEngine(), PhysicsEngine(), FeatureEngine(), PostProcessEngine(distance_sigma)])

    def _run(self, frame: Frame, engines) -> Frame:
        for engine in engines:
            try:
                frame = engine.step(frame)
            except EngineError:
                raise
            except Exception as exc:
                raise EngineError(engine.role, exc) from exc
            if engine.role == EngineRole.PHYSICS:
                frame = replace(frame, world=replace(frame.world, time_step=frame.world.time_step + 1))
        return frame

    def run(self, world: WorldState, command: Command, seed: int = 0) -> Frame:
        return self._run(Frame(world, command, seed), self.engines)

    def observe(self, world: WorldState, seed: int = 0) -> Frame:
        """Feature and post-process only: the observation of ``world`` without stepping."""
        return self._run(Frame(world, ZERO_COMMAND, seed), self.engines[2:])

    def close(self) -> None:
        for engine in self.engines:
            close = getattr(engine, "close", None)
            if close is not None:
                close()


def pipeline_step(pipeline: EnginePipeline, world: WorldState, command: Command, seed: int = 0):
    frame = pipeline.run(world, command, seed)
    return frame.world, frame.observation
