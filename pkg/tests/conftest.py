import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from taskseq.engines import EnginePipeline
from taskseq.sequencer import TaskBlock
from taskseq.tasks import handbuilt_grasp_params, make_bring, make_grasp, make_pick, make_place, make_release

settings.register_profile("default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

# filled by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def pipeline():
    return EnginePipeline.local(0.01)


@pytest.fixture
def quiet_pipeline():
    return EnginePipeline.local(0.0)


@pytest.fixture
def registry():
    """grasp (hand-built weights) plus the four programmed blocks."""
    return {
        "grasp": TaskBlock("grasp", make_grasp({}), tuple(handbuilt_grasp_params())),
        "pick": TaskBlock("pick", make_pick({})),
        "bring": TaskBlock("bring", make_bring({"displacement": [0.0, 0.3, 0.0]})),
        "place": TaskBlock("place", make_place({})),
        "release": TaskBlock("release", make_release({})),
    }
