"""Small hand-made worlds used across test modules."""

from taskseq.engines import EnginePipeline, analytic_ik, grip_force
from taskseq.sequencer import TaskBlock, run_task_model
from taskseq.tasks import BIN, make_pick
from taskseq.world import IDENTITY, ObjectState, Pose2, WorldState, held, resting


def gripping(aperture, width=0.08, mass=0.2):
    ee = Pose2(1.8, 0, 0)
    force = grip_force(width, aperture)
    return WorldState(
        joints=analytic_ik(ee),
        ee=ee,
        aperture=aperture,
        objects={"target": ObjectState(Pose2(1.8, 0, 0), width=width, mass=mass)},
        surfaces={"bin": BIN},
        attachments=(resting("target"), held("target", IDENTITY)),
        jaw_contacts=(True, True),
        jaw_torques=(force / 2, force / 2),
        target="target",
    )


def run_block(block, world, seed=0):
    return run_task_model(block, world, EnginePipeline.local(0.0), seed)


def lifted(aperture=0.06):
    end, _ = run_block(TaskBlock("pick", make_pick({})), gripping(aperture))
    return end
