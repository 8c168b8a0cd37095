"""Shared simulation state: planar poses, objects, attachments and the observable view."""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field, replace
from typing import Optional

TABLE = "table"

HINGE = "hinge"
RESTING = "resting"
END_EFFECTOR = "end_effector"

OBS_DIM = 6
DEFAULT_DISTANCE_SIGMA = 0.01


class MissingTarget(LookupError):
    pass


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a = math.pi
    return a


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not -math.pi < self.theta <= math.pi:
            object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


IDENTITY = Pose2()


def compose_pose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def invert_pose(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.theta)


def relative_pose(a: Pose2, b: Pose2) -> Pose2:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose_pose(invert_pose(a), b)


@dataclass(frozen=True)
class ObjectState:
    pose: Pose2
    height: float = 0.0  # elevation of the object's base above the floor plane
    width: float = 0.08
    mass: float = 0.2
    crushed: bool = False


@dataclass(frozen=True)
class Surface:
    """A disc-shaped support region (receptacle, shelf).  The table is implicit."""

    x: float
    y: float
    radius: float
    z: float = 0.0

    def contains(self, x: float, y: float) -> bool:
        return math.hypot(x - self.x, y - self.y) <= self.radius


@dataclass(frozen=True)
class Attachment:
    """One edge of the attachment graph.

    ``kind`` is ``hinge`` (rigid environment joint, ``anchor`` is the hinge pose whose
    theta is the closed-door angle of the handle about the hinge), ``resting`` (on
    ``surface``) or ``end_effector`` (held with ``offset`` and ``z_offset``).
    """

    child: str
    kind: str
    anchor: Optional[Pose2] = None
    radius: Optional[float] = None
    surface: Optional[str] = None
    offset: Optional[Pose2] = None
    z_offset: float = 0.0

    @property
    def environmental(self) -> bool:
        return self.kind in (HINGE, RESTING)


def hinge(child: str, anchor: Pose2, radius: float) -> Attachment:
    return Attachment(child, HINGE, anchor=anchor, radius=radius)


def resting(child: str, surface: str = TABLE) -> Attachment:
    return Attachment(child, RESTING, surface=surface)


def held(child: str, offset: Pose2, z_offset: float = 0.0) -> Attachment:
    return Attachment(child, END_EFFECTOR, offset=offset, z_offset=z_offset)


def check_attachments(attachments) -> None:
    env, ee = set(), set()
    for a in attachments:
        if a.kind not in (HINGE, RESTING, END_EFFECTOR):
            raise ValueError(f"unknown attachment kind {a.kind!r}")
        bucket = env if a.environmental else ee
        if a.child in bucket:
            raise ValueError(f"object {a.child!r} has two {a.kind} attachments")
        bucket.add(a.child)
        if a.kind == HINGE and (a.anchor is None or not a.radius or a.radius <= 0):
            raise ValueError("hinge attachment needs an anchor and a positive radius")
        if a.kind == RESTING and not a.surface:
            raise ValueError("resting attachment needs a surface id")
        if a.kind == END_EFFECTOR and a.offset is None:
            raise ValueError("end-effector attachment needs a grasp offset")


@dataclass(frozen=True)
class WorldState:
    joints: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ee: Pose2 = IDENTITY
    ee_z: float = 0.0
    aperture: float = 0.15
    aperture_max: float = 0.15
    objects: dict[str, ObjectState] = field(default_factory=dict)
    surfaces: dict[str, Surface] = field(default_factory=dict)
    attachments: tuple[Attachment, ...] = ()
    wrist_force: float = 0.0
    jaw_contacts: tuple[bool, bool] = (False, False)
    jaw_torques: tuple[float, float] = (0.0, 0.0)
    target: Optional[str] = None
    time_step: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.aperture <= self.aperture_max:
            raise ValueError(f"aperture {self.aperture} outside [0, {self.aperture_max}]")
        if self.wrist_force < 0 or min(self.jaw_torques) < 0:
            raise ValueError("forces and torques must be non-negative")
        if any(abs(q) > math.pi for q in self.joints):
            raise ValueError("joint outside limits")
        check_attachments(self.attachments)
        for a in self.attachments:
            if a.child not in self.objects:
                raise ValueError(f"attachment references unknown object {a.child!r}")
            if a.kind == RESTING and a.surface != TABLE and a.surface not in self.surfaces:
                raise ValueError(f"unknown surface {a.surface!r}")
        if self.target is not None and self.target not in self.objects:
            raise ValueError(f"unknown target {self.target!r}")

    # attachment queries

    def attachment(self, child: str, kind: str) -> Optional[Attachment]:
        for a in self.attachments:
            if a.child == child and a.kind == kind:
                return a
        return None

    def held_objects(self) -> list[str]:
        return [a.child for a in self.attachments if a.kind == END_EFFECTOR]

    def is_held(self, child: str) -> bool:
        return self.attachment(child, END_EFFECTOR) is not None

    def support_of(self, child: str) -> Optional[Attachment]:
        for a in self.attachments:
            if a.child == child and a.environmental:
                return a
        return None

    def support_z(self, x: float, y: float) -> tuple[str, float]:
        """Highest surface under (x, y); the table (z = 0) is only the fallback.

        A surface replaces the table where it lies, so a bin may sit below table level.
        """
        best, z = TABLE, 0.0
        found = False
        for sid in sorted(self.surfaces):
            s = self.surfaces[sid]
            if s.contains(x, y) and (not found or s.z > z):
                best, z, found = sid, s.z, True
        return best, z

    def with_objects(self, **changes: ObjectState) -> "WorldState":
        objs = dict(self.objects)
        objs.update(changes)
        return replace(self, objects=objs)


def target_distance(world: WorldState) -> float:
    if world.target is None or world.target not in world.objects:
        raise MissingTarget("world has no designated target object")
    p = world.objects[world.target].pose
    return math.hypot(p.x - world.ee.x, p.y - world.ee.y)


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of integers."""
    h = hashlib.blake2b(",".join(str(int(p)) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(frozen=True)
class ObservableState:
    """What a real robot could measure.  Object width and mass are deliberately absent."""

    joints: tuple[float, float, float]
    ee: Pose2
    aperture: float
    wrist_force: float
    jaw_contacts: tuple[bool, bool]
    jaw_torques: tuple[float, float]
    estimated_target_distance: float


def observable_projection(
    world: WorldState, noise_seed: int, sigma: float = DEFAULT_DISTANCE_SIGMA
) -> ObservableState:
    try:
        d = target_distance(world)
    except MissingTarget:
        d = 0.0
    if sigma > 0.0:
        d += random.Random(noise_seed).gauss(0.0, sigma)
    return ObservableState(
        joints=world.joints,
        ee=world.ee,
        aperture=world.aperture,
        wrist_force=world.wrist_force,
        jaw_contacts=world.jaw_contacts,
        jaw_torques=world.jaw_torques,
        estimated_target_distance=d,
    )
