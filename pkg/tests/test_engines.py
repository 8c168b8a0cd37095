import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taskseq.engines import (
    F_CRUSH,
    K_CONSTRAINT,
    Command,
    ConfigurationError,
    EngineError,
    EnginePipeline,
    EngineRole,
    FeatureEngine,
    KinematicsEngine,
    PhysicsEngine,
    PostProcessEngine,
    Unreachable,
    VisualFeatures,
    ZERO_COMMAND,
    door_angle,
    feature_extract,
    forward_kinematics,
    grip_force,
    inverse_kinematics,
    physics_step,
    pipeline_step,
    postprocess,
    slip_threshold,
    solve_ik,
)
from taskseq.world import (
    MissingTarget,
    ObjectState,
    ObservableState,
    Pose2,
    WorldState,
    held,
    compose_pose,
    hinge,
    relative_pose,
    resting,
)


def pose_residual(q, target: Pose2) -> float:
    p = forward_kinematics(q)
    return math.hypot(p.x - target.x, p.y - target.y) + abs(math.remainder(p.theta - target.theta, 2 * math.pi))


@pytest.mark.parametrize(
    "q, expected",
    [
        ((0, 0, 0), (2.5, 0, 0)),
        ((math.pi / 2, 0, 0), (0, 2.5, math.pi / 2)),
        ((math.pi / 2, -math.pi / 2, 0), (1.5, 1.0, 0)),
    ],
)
def test_forward_kinematics_examples(q, expected):
    p = forward_kinematics(q)
    assert (p.x, p.y, p.theta) == pytest.approx(expected, abs=1e-12)


def test_ik_full_extension():
    q = inverse_kinematics(Pose2(2.5, 0, 0), (0, 0, 0))
    assert pose_residual(q, Pose2(2.5, 0, 0)) <= 1e-6


def test_ik_unreachable():
    with pytest.raises(Unreachable):
        inverse_kinematics(Pose2(3.5, 0, 0), (0, 0, 0))


def test_ik_from_nearby_seed_checked_by_fk():
    target = Pose2(1.5, 1.0, 0)
    q = inverse_kinematics(target, (0.1, 0.1, 0.1))
    assert pose_residual(q, target) <= 1e-6


def random_reachable_targets(n, seed=0):
    rng = np.random.default_rng(seed)
    qs = rng.uniform(-math.pi, math.pi, size=(n, 3))
    return [forward_kinematics(q) for q in qs]


def test_ik_thousand_random_targets():
    rng = np.random.default_rng(1)
    worst = 0.0
    for t in random_reachable_targets(1000):
        seed = tuple(rng.uniform(-math.pi, math.pi, 3))
        worst = max(worst, pose_residual(solve_ik(t, seed), t))
    assert worst <= 1e-6


@given(st.floats(0.0, 0.2), st.floats(0.0, 0.2), st.floats(0.0, 0.2))
def test_grip_force_monotone_and_zero_when_open(width, a1, a2):
    lo, hi = sorted((a1, a2))
    assert grip_force(width, hi) <= grip_force(width, lo)
    if hi >= width:
        assert grip_force(width, hi) == 0.0


@pytest.mark.parametrize("aperture, force", [(0.10, 0.0), (0.08, 0.0), (0.06, 10.0)])
def test_grip_force_examples(aperture, force):
    assert grip_force(0.08, aperture) == pytest.approx(force)


def test_slip_threshold_value():
    assert slip_threshold(0.2) == pytest.approx(0.2 * 11.81 / 0.5)


def holding_world(aperture, lifted=False):
    ee = Pose2(1.5, 0, 0)
    obj = ObjectState(Pose2(1.5, 0, 0), height=0.05 if lifted else 0.0, width=0.08, mass=0.2)
    atts = (held("t", Pose2(0, 0, 0)),) if lifted else (resting("t"), held("t", Pose2(0, 0, 0)))
    return WorldState(ee=ee, ee_z=obj.height, aperture=aperture, objects={"t": obj}, attachments=atts, target="t")


def test_rigid_attachment_translates_object():
    w = holding_world(0.06, lifted=True)
    out = physics_step(w, Command(dx=0.1))
    assert out.objects["t"].pose.x - w.objects["t"].pose.x == pytest.approx(0.1, abs=1e-15)
    assert relative_pose(out.ee, out.objects["t"].pose) == Pose2(0, 0, 0)


def test_weak_grip_drops_on_lift():
    # 500 * (0.08 - 0.076) = 2 N, below the 4.72 N slip threshold
    w = holding_world(0.076)
    for _ in range(3):
        w = physics_step(w, Command(lift_delta=0.02))
    assert not w.is_held("t")
    assert w.support_of("t").kind == "resting"
    assert w.objects["t"].height == 0.0


def test_firm_grip_lifts():
    w = holding_world(0.06)
    for _ in range(3):
        w = physics_step(w, Command(lift_delta=0.02))
    assert w.is_held("t") and w.support_of("t") is None
    assert w.objects["t"].height == pytest.approx(0.06)


def door_world(radius=0.7, theta=-math.pi / 2):
    c = Pose2(1, 1, 0)
    handle = Pose2(1 + radius * math.cos(theta), 1 + radius * math.sin(theta), 0)
    ee = Pose2(handle.x, handle.y, math.pi / 2)
    return WorldState(
        ee=ee,
        aperture=0.07,
        objects={"door": ObjectState(handle, width=0.08)},
        attachments=(hinge("door", c, radius), held("door", Pose2(0, 0, 0))),
        target="door",
    )


@given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_door_step_stays_on_circle(dx, dy):
    w = door_world()
    out = physics_step(w, Command(dx=dx, dy=dy))
    h = out.objects["door"].pose
    assert abs(math.hypot(h.x - 1, h.y - 1) - 0.7) <= 1e-9


def test_door_wrist_force_is_radial_error():
    w = door_world()
    cmd = Command(dx=0.01, dy=-0.02)
    # unconstrained handle position, then its distance off the circle
    free = compose_pose(w.ee, Pose2(cmd.dx, cmd.dy, cmd.dtheta))
    hx, hy = free.x, free.y
    radial = abs(math.hypot(hx - 1, hy - 1) - 0.7)
    out = physics_step(w, cmd)
    assert out.wrist_force == pytest.approx(K_CONSTRAINT * radial, rel=1e-9)
    assert door_angle(out, "door") > door_angle(w, "door") - 1e-12


def test_crush_flag_latches():
    w = holding_world(0.0, lifted=True)  # 40 N
    out = physics_step(w, ZERO_COMMAND)
    assert grip_force(0.08, 0.0) > F_CRUSH
    assert out.objects["t"].crushed
    out = physics_step(out, Command(aperture_delta=0.02))
    assert out.objects["t"].crushed


def free_world():
    return WorldState(
        ee=Pose2(1.5, 0, 0),
        joints=(0.0, 0.0, 0.0),
        aperture=0.15,
        objects={"t": ObjectState(Pose2(1.8, 0, 0)), "u": ObjectState(Pose2(1.0, 0.5, 0))},
        attachments=(resting("t"), resting("u")),
        target="t",
    )


@given(st.floats(-0.1, 0.1), st.floats(-0.1, 0.1), st.floats(-0.3, 0.3))
def test_free_objects_never_move(dx, dy, dth):
    w = free_world()
    out = physics_step(w, Command(dx=dx, dy=dy, dtheta=dth))
    for oid in ("t", "u"):
        if not out.is_held(oid):
            assert out.objects[oid].pose == w.objects[oid].pose


def test_palm_stops_at_object():
    w = replace(free_world(), aperture=0.15)
    out = physics_step(w, Command(dx=0.5))
    assert out.ee.x <= 1.8 + 1e-12


def test_feature_examples():
    w = WorldState(objects={"t": ObjectState(Pose2(0.3, 0.04, 0))}, attachments=(resting("t"),), target="t")
    f = feature_extract(w)
    assert f.distance == pytest.approx(math.hypot(0.3, 0.04))
    assert f.lateral == pytest.approx(0.04)
    w0 = replace(w, ee=Pose2(0.3, 0.04, 0))
    assert feature_extract(w0) == VisualFeatures(0.0, 0.0)
    with pytest.raises(MissingTarget):
        feature_extract(replace(w, target=None))


def test_postprocess_zero():
    obs = ObservableState((0, 0, 0), Pose2(), 0.0, 0.0, (False, False), (0.0, 0.0), 0.0)
    assert postprocess(VisualFeatures(0.0, 0.0), obs) == (0.0,) * 6


def start_world():
    from taskseq.engines import analytic_ik

    ee = Pose2(1.5, 0, 0)
    w = free_world()
    return replace(w, joints=analytic_ik(ee), ee=ee)


def test_zero_command_only_advances_time():
    w = start_world()
    out, _ = pipeline_step(EnginePipeline.local(), w, ZERO_COMMAND)
    assert out == replace(w, time_step=w.time_step + 1)


def test_pipeline_ordering_enforced():
    with pytest.raises(ConfigurationError):
        EnginePipeline([PhysicsEngine(), KinematicsEngine(), FeatureEngine(), PostProcessEngine()])
    with pytest.raises(ConfigurationError):
        EnginePipeline([KinematicsEngine(), PhysicsEngine(), FeatureEngine()])


def test_pipeline_is_pure():
    p = EnginePipeline.local()
    w = start_world()
    a = pipeline_step(p, w, Command(dx=0.03, dtheta=0.1), seed=9)
    b = pipeline_step(p, w, Command(dx=0.03, dtheta=0.1), seed=9)
    assert a == b


def test_kinematics_tracks_ee():
    p = EnginePipeline.local()
    w = start_world()
    out, _ = pipeline_step(p, w, Command(dx=0.05, dtheta=0.2))
    fk = forward_kinematics(out.joints)
    assert math.hypot(fk.x - out.ee.x, fk.y - out.ee.y) <= 1e-6


def test_commands_are_clamped():
    p = EnginePipeline.local()
    w = start_world()
    frame = p.run(w, Command(dx=5, dy=-5, dtheta=3, aperture_delta=-1, lift_delta=1))
    c = frame.command
    assert c.within()
    assert w.ee.x + 0.05 >= frame.world.ee.x


def test_engine_errors_carry_role():
    p = EnginePipeline.local()
    w = replace(start_world(), target=None)
    with pytest.raises(EngineError) as info:
        pipeline_step(p, w, ZERO_COMMAND)
    assert info.value.role == EngineRole.FEATURE
    assert isinstance(info.value.cause, MissingTarget)


def test_role_names():
    assert EngineRole.parse("physics") == EngineRole.PHYSICS
    with pytest.raises(ValueError):
        EngineRole.parse("render")
