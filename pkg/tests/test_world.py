import math
import statistics

import pytest
from hypothesis import given, strategies as st

from taskseq.world import (
    IDENTITY,
    MissingTarget,
    ObjectState,
    Pose2,
    Surface,
    WorldState,
    compose_pose,
    derive_seed,
    held,
    hinge,
    invert_pose,
    observable_projection,
    relative_pose,
    resting,
    target_distance,
    wrap_angle,
)

finite = st.floats(-10, 10, allow_nan=False)
angles = st.floats(-20, 20, allow_nan=False)
poses = st.builds(Pose2, finite, finite, angles)


def close(a: Pose2, b: Pose2, tol=1e-9):
    return abs(a.x - b.x) <= tol and abs(a.y - b.y) <= tol and abs(wrap_angle(a.theta - b.theta)) <= tol


@given(angles)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_wrap_angle_minus_pi_maps_to_pi():
    assert wrap_angle(-math.pi) == math.pi
    assert Pose2(0, 0, -math.pi).theta == math.pi


@given(poses)
def test_compose_with_inverse_is_identity(p):
    assert close(compose_pose(p, invert_pose(p)), IDENTITY)
    assert close(compose_pose(invert_pose(p), p), IDENTITY)


@given(poses, poses, poses)
def test_compose_is_associative(a, b, c):
    assert close(compose_pose(compose_pose(a, b), c), compose_pose(a, compose_pose(b, c)), 1e-8)


@given(poses, poses)
def test_relative_pose_recovers_b(a, b):
    assert close(compose_pose(a, relative_pose(a, b)), b, 1e-8)


def test_relative_pose_example():
    r = relative_pose(Pose2(1, 0, math.pi / 2), Pose2(1, 1, 0))
    assert close(r, Pose2(1, 0, -math.pi / 2))


def _world(**kw):
    base = dict(
        ee=Pose2(0, 0, 0),
        objects={"t": ObjectState(Pose2(0.3, 0.04, 0))},
        attachments=(resting("t"),),
        target="t",
    )
    base.update(kw)
    return WorldState(**base)


def test_target_distance_oracle():
    assert target_distance(_world()) == pytest.approx(math.hypot(0.3, 0.04))
    with pytest.raises(MissingTarget):
        target_distance(_world(target=None))


def test_validate_rejects_duplicate_environment_attachments():
    w = _world(attachments=(resting("t"), hinge("t", Pose2(1, 1, 0), 0.5)))
    with pytest.raises(ValueError):
        w.validate()


def test_validate_rejects_bad_aperture_and_unknown_surface():
    with pytest.raises(ValueError):
        _world(aperture=0.2, aperture_max=0.15).validate()
    with pytest.raises(ValueError):
        _world(attachments=(resting("t", "shelf"),)).validate()


def test_attachment_queries():
    w = _world(attachments=(resting("t"), held("t", IDENTITY)))
    w.validate()
    assert w.is_held("t") and w.held_objects() == ["t"]
    assert w.support_of("t").kind == "resting"


def test_support_prefers_surface_over_table():
    w = _world(surfaces={"bin": Surface(1, 1, 0.2, -0.2), "shelf": Surface(1, 1, 0.1, 0.3)})
    assert w.support_z(1.0, 1.0) == ("shelf", 0.3)
    assert w.support_z(1.15, 1.0) == ("bin", -0.2)
    assert w.support_z(3.0, 3.0) == ("table", 0.0)


def test_derive_seed_is_stable_and_spread():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    assert 0 <= derive_seed(7) < 2**63


def test_projection_without_noise_is_exact():
    w = _world(objects={"t": ObjectState(Pose2(0.3, 0, 0))})
    assert observable_projection(w, 5, sigma=0.0).estimated_target_distance == 0.3


def test_projection_drops_hidden_fields():
    obs = observable_projection(_world(), 1)
    assert not hasattr(obs, "width") and not hasattr(obs, "mass")


def test_projection_noise_is_unbiased():
    w = _world(objects={"t": ObjectState(Pose2(0.3, 0, 0))})
    errs = [observable_projection(w, s, 0.01).estimated_target_distance - 0.3 for s in range(10_000)]
    assert abs(statistics.fmean(errs)) <= 0.001
    assert statistics.pstdev(errs) == pytest.approx(0.01, rel=0.05)


def test_projection_is_deterministic_per_seed():
    w = _world()
    assert observable_projection(w, 42) == observable_projection(w, 42)
