import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taskseq import wire
from taskseq.engines import (
    Command,
    EngineError,
    EnginePipeline,
    EngineRole,
    FeatureEngine,
    KinematicsEngine,
    PhysicsEngine,
    PostProcessEngine,
    ZERO_COMMAND,
    analytic_ik,
    physics_step,
)
from taskseq.world import ObjectState, Pose2, WorldState, held, resting

from oracles import codec_mismatches, random_state


def test_hexfloat_examples():
    assert wire.hexfloat(0.1) == "0x1.999999999999ap-4"
    assert wire.hexfloat(0.0) == "0x0p+0"
    assert wire.unhex("0x1.999999999999ap-4") == 0.1
    with pytest.raises(ValueError):
        wire.hexfloat(float("nan"))


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_hexfloat_round_trip_bits(x):
    back = wire.unhex(wire.hexfloat(x))
    assert struct.pack("<d", back) == struct.pack("<d", x)


def test_codec_thousand_random_states():
    assert codec_mismatches(1000, seed=3) == 0


@given(st.integers(0, 2**32 - 1))
def test_codec_round_trip_property(seed):
    s = random_state(np.random.default_rng(seed))
    assert wire.decode_state(wire.encode_state(s)) == s


def test_codec_keys_sorted_and_hex():
    raw = wire.encode_state(WorldState(aperture=0.1))
    assert b"0x1.999999999999ap-4" in raw
    assert b" " not in raw


def test_encoder_rejects_nan():
    with pytest.raises(ValueError):
        wire.encode_state(WorldState(wrist_force=float("nan")))


@pytest.mark.parametrize("raw", [b"{not json", b"[1, 2]", b'{"joints": 1}', b"\xff\xfe"])
def test_decode_errors_report_offset(raw):
    with pytest.raises(wire.MalformedState) as info:
        wire.decode_state(raw)
    assert info.value.offset >= 0


def test_decode_offset_points_into_text():
    with pytest.raises(wire.MalformedState) as info:
        wire.decode_state(b'{"a": 1,, }')
    assert info.value.offset == 8


def test_endpoint_parsing(monkeypatch):
    assert wire.parse_endpoint("10.0.0.1:9000") == ("10.0.0.1", 9000)
    monkeypatch.setenv("TASKSEQ_PORT", "7600")
    assert wire.parse_endpoint("localhost") == ("localhost", 7600)
    monkeypatch.delenv("TASKSEQ_PORT")
    assert wire.parse_endpoint("localhost") == ("localhost", 7471)
    for bad in ("", ":80", "host:port", "host:70000"):
        with pytest.raises(ValueError):
            wire.parse_endpoint(bad)


def sample_world():
    ee = Pose2(1.5, 0, 0)
    return WorldState(
        joints=analytic_ik(ee),
        ee=ee,
        aperture=0.06,
        objects={"t": ObjectState(Pose2(1.5, 0, 0), width=0.08)},
        attachments=(resting("t"), held("t", Pose2(0, 0, 0))),
        target="t",
    )


@pytest.fixture
def physics_server():
    with wire.EngineServer(PhysicsEngine(), "127.0.0.1", 0).start() as srv:
        yield srv


def test_set_then_get_state_echo(physics_server):
    c = wire.EngineClient(physics_server.endpoint)
    s = sample_world()
    c.request("set_state", state=wire.state_to_wire(s))
    got = c.request("get_state")["state"]
    assert wire.dumps(got).encode() == wire.encode_state(s)
    assert c.request("info")["role"] == "physics"
    c.close()


def test_remote_physics_matches_local(physics_server):
    c = wire.EngineClient(physics_server.endpoint)
    s = sample_world()
    for cmd in (Command(dx=0.03, lift_delta=0.02), Command(dy=-0.01, aperture_delta=0.02), ZERO_COMMAND):
        remote = wire.remote_engine_step(c, s, cmd)
        local = physics_step(s, cmd)
        assert wire.encode_state(remote) == wire.encode_state(local)
        s = local
    c.close()


def test_non_monotonic_id_rejected(physics_server):
    import json
    import socket

    with socket.create_connection(physics_server.address, timeout=5) as sock:
        f = sock.makefile("rwb")
        for i in (5, 5):
            f.write(json.dumps({"op": "info", "id": i}).encode() + b"\n")
            f.flush()
        first = json.loads(f.readline())
        second = json.loads(f.readline())
        assert first["ok"] and first["id"] == 5
        assert second["ok"] is False and "not greater" in second["error"]
        assert f.readline() == b""  # connection closed after the violation


def test_zero_command_through_remote_kinematics():
    with wire.EngineServer(KinematicsEngine(), "127.0.0.1", 0).start() as srv:
        eng = wire.RemoteEngine(EngineRole.KINEMATICS, srv.endpoint)
        s = sample_world()
        out = wire.remote_engine_step(eng, s, ZERO_COMMAND)
        eng.close()
    assert out == s


def test_remote_pipeline_is_transparent(physics_server):
    remote = EnginePipeline(
        [KinematicsEngine(), wire.RemoteEngine(EngineRole.PHYSICS, physics_server.endpoint), FeatureEngine(), PostProcessEngine()]
    )
    local = EnginePipeline.local()
    a = b = sample_world()
    for t in range(5):
        cmd = Command(dx=0.02, lift_delta=0.01 * (t % 2))
        fa, fb = local.run(a, cmd, seed=4), remote.run(b, cmd, seed=4)
        assert wire.encode_state(fa.world) == wire.encode_state(fb.world)
        assert fa.observation == fb.observation
        a, b = fa.world, fb.world
    remote.close()


def test_disconnect_surfaces_as_engine_error():
    srv = wire.EngineServer(PhysicsEngine(), "127.0.0.1", 0).start()
    endpoint = srv.endpoint
    pipe = EnginePipeline([KinematicsEngine(), wire.RemoteEngine(EngineRole.PHYSICS, endpoint, timeout=2.0),
                           FeatureEngine(), PostProcessEngine()])
    pipe.run(sample_world(), ZERO_COMMAND)
    srv.close()
    pipe.engines[1].client.close()
    with pytest.raises(EngineError) as info:
        pipe.run(sample_world(), ZERO_COMMAND)
    assert info.value.role == EngineRole.PHYSICS
    assert isinstance(info.value.cause, wire.Disconnected)
