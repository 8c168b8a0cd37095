"""Bit-exact state codec and a newline-delimited TCP protocol for hosting engines remotely.

Every real number travels as a C99 hexadecimal float literal ("0x1.999999999999ap-4"),
so a state decoded on the other side of a socket has exactly the same bits.
"""

from __future__ import annotations

import json
import logging
import math
import os
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Any, Optional

from .engines import Command, EngineRole, Frame, VisualFeatures
from .world import Attachment, ObjectState, ObservableState, Pose2, Surface, WorldState

log = logging.getLogger(__name__)

DEFAULT_PORT = 7471
DEFAULT_TIMEOUT = 5.0
PROTOCOL_VERSION = 1
OPS = ("reset", "step", "get_state", "set_state", "info")


class WireError(RuntimeError):
    pass


class MalformedState(WireError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class Timeout(WireError):
    pass


class Disconnected(WireError):
    pass


class RemoteError(WireError):
    pass


# hex floats


def hexfloat(x: float) -> str:
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot encode non-finite value {x!r}")
    mant, exp = x.hex().split("p")
    if "." in mant:
        mant = mant.rstrip("0").rstrip(".")
    return f"{mant}p{exp}"


def unhex(s) -> float:
    if not isinstance(s, str):
        raise TypeError(f"expected hex-float string, got {type(s).__name__}")
    v = float.fromhex(s)
    if math.isnan(v) or math.isinf(v):
        raise ValueError(f"non-finite value {s!r}")
    return v


# structured encoding


def pose_to_wire(p: Pose2) -> list[str]:
    return [hexfloat(p.x), hexfloat(p.y), hexfloat(p.theta)]


def pose_from_wire(v) -> Pose2:
    x, y, t = v
    return Pose2(unhex(x), unhex(y), unhex(t))


def _opt(fn, v):
    return None if v is None else fn(v)


def state_to_wire(w: WorldState) -> dict:
    return {
        "joints": [hexfloat(q) for q in w.joints],
        "ee": pose_to_wire(w.ee),
        "ee_z": hexfloat(w.ee_z),
        "aperture": hexfloat(w.aperture),
        "aperture_max": hexfloat(w.aperture_max),
        "objects": {
            k: {
                "pose": pose_to_wire(o.pose),
                "height": hexfloat(o.height),
                "width": hexfloat(o.width),
                "mass": hexfloat(o.mass),
                "crushed": bool(o.crushed),
            }
            for k, o in w.objects.items()
        },
        "surfaces": {
            k: {"x": hexfloat(s.x), "y": hexfloat(s.y), "radius": hexfloat(s.radius), "z": hexfloat(s.z)}
            for k, s in w.surfaces.items()
        },
        "attachments": [
            {
                "child": a.child,
                "kind": a.kind,
                "anchor": _opt(pose_to_wire, a.anchor),
                "radius": _opt(hexfloat, a.radius),
                "surface": a.surface,
                "offset": _opt(pose_to_wire, a.offset),
                "z_offset": hexfloat(a.z_offset),
            }
            for a in w.attachments
        ],
        "wrist_force": hexfloat(w.wrist_force),
        "jaw_contacts": [bool(c) for c in w.jaw_contacts],
        "jaw_torques": [hexfloat(t) for t in w.jaw_torques],
        "target": w.target,
        "time_step": int(w.time_step),
    }


def state_from_wire(d: dict) -> WorldState:
    objects = {}
    for k, o in d["objects"].items():
        objects[k] = ObjectState(
            pose_from_wire(o["pose"]), unhex(o["height"]), unhex(o["width"]), unhex(o["mass"]), _bool(o["crushed"])
        )
    surfaces = {
        k: Surface(unhex(s["x"]), unhex(s["y"]), unhex(s["radius"]), unhex(s["z"])) for k, s in d["surfaces"].items()
    }
    attachments = tuple(
        Attachment(
            child=_str(a["child"]),
            kind=_str(a["kind"]),
            anchor=_opt(pose_from_wire, a["anchor"]),
            radius=_opt(unhex, a["radius"]),
            surface=a["surface"],
            offset=_opt(pose_from_wire, a["offset"]),
            z_offset=unhex(a["z_offset"]),
        )
        for a in d["attachments"]
    )
    q = d["joints"]
    if len(q) != 3:
        raise ValueError("joints must have 3 entries")
    return WorldState(
        joints=(unhex(q[0]), unhex(q[1]), unhex(q[2])),
        ee=pose_from_wire(d["ee"]),
        ee_z=unhex(d["ee_z"]),
        aperture=unhex(d["aperture"]),
        aperture_max=unhex(d["aperture_max"]),
        objects=objects,
        surfaces=surfaces,
        attachments=attachments,
        wrist_force=unhex(d["wrist_force"]),
        jaw_contacts=(_bool(d["jaw_contacts"][0]), _bool(d["jaw_contacts"][1])),
        jaw_torques=(unhex(d["jaw_torques"][0]), unhex(d["jaw_torques"][1])),
        target=d["target"],
        time_step=_int(d["time_step"]),
    )


def _bool(v) -> bool:
    if not isinstance(v, bool):
        raise TypeError("expected boolean")
    return v


def _int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected integer")
    return v


def _str(v) -> str:
    if not isinstance(v, str):
        raise TypeError("expected string")
    return v


def command_to_wire(c: Command) -> dict:
    return {
        "dx": hexfloat(c.dx),
        "dy": hexfloat(c.dy),
        "dtheta": hexfloat(c.dtheta),
        "aperture_delta": hexfloat(c.aperture_delta),
        "lift_delta": hexfloat(c.lift_delta),
    }


def command_from_wire(d: dict) -> Command:
    return Command(
        unhex(d["dx"]), unhex(d["dy"]), unhex(d["dtheta"]), unhex(d["aperture_delta"]), unhex(d["lift_delta"])
    )


def observable_to_wire(o: ObservableState) -> dict:
    return {
        "joints": [hexfloat(q) for q in o.joints],
        "ee": pose_to_wire(o.ee),
        "aperture": hexfloat(o.aperture),
        "wrist_force": hexfloat(o.wrist_force),
        "jaw_contacts": [bool(c) for c in o.jaw_contacts],
        "jaw_torques": [hexfloat(t) for t in o.jaw_torques],
        "estimated_target_distance": hexfloat(o.estimated_target_distance),
    }


def observable_from_wire(d: dict) -> ObservableState:
    q = d["joints"]
    return ObservableState(
        joints=(unhex(q[0]), unhex(q[1]), unhex(q[2])),
        ee=pose_from_wire(d["ee"]),
        aperture=unhex(d["aperture"]),
        wrist_force=unhex(d["wrist_force"]),
        jaw_contacts=(_bool(d["jaw_contacts"][0]), _bool(d["jaw_contacts"][1])),
        jaw_torques=(unhex(d["jaw_torques"][0]), unhex(d["jaw_torques"][1])),
        estimated_target_distance=unhex(d["estimated_target_distance"]),
    )


def frame_to_wire(f: Frame) -> dict:
    return {
        "state": state_to_wire(f.world),
        "command": command_to_wire(f.command),
        "seed": int(f.seed),
        "features": None if f.features is None else [hexfloat(f.features.distance), hexfloat(f.features.lateral)],
        "observable": _opt(observable_to_wire, f.observable),
        "observation": _opt(lambda o: [hexfloat(v) for v in o], f.observation),
    }


def frame_from_wire(d: dict, state: Optional[WorldState] = None) -> Frame:
    feats = d.get("features")
    obs = d.get("observation")
    return Frame(
        world=state if state is not None else state_from_wire(d["state"]),
        command=command_from_wire(d["command"]) if d.get("command") is not None else Command(),
        seed=_int(d.get("seed", 0)),
        features=None if feats is None else VisualFeatures(unhex(feats[0]), unhex(feats[1])),
        observable=_opt(observable_from_wire, d.get("observable")),
        observation=None if obs is None else tuple(unhex(v) for v in obs),
    )


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode_state(world: WorldState) -> bytes:
    return dumps(state_to_wire(world)).encode("utf-8")


def _key_offset(raw: bytes, exc: BaseException) -> int:
    if isinstance(exc, KeyError) and exc.args:
        pos = raw.find(b'"%s"' % str(exc.args[0]).encode())
        return max(pos, 0)
    return 0


def decode_state(raw: bytes) -> WorldState:
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedState("state is not UTF-8", exc.start) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedState(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(data, dict):
        raise MalformedState("state must be an object", 0)
    try:
        return state_from_wire(data)
    except KeyError as exc:
        raise MalformedState(f"missing field {exc.args[0]!r}", _key_offset(raw, exc)) from None
    except (TypeError, ValueError, AttributeError, IndexError) as exc:
        raise MalformedState(f"bad field value: {exc}", 0) from None


# endpoints


def default_port() -> int:
    return int(os.environ.get("TASKSEQ_PORT", DEFAULT_PORT))


def parse_endpoint(text: str) -> tuple[str, int]:
    """``host:port`` or bare ``host`` (port from TASKSEQ_PORT, default 7471)."""
    if not isinstance(text, str) or not text:
        raise ValueError("endpoint must be a non-empty string")
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port_num = text, default_port()
    else:
        if not host or not port.isdigit():
            raise ValueError(f"malformed endpoint {text!r}")
        port_num = int(port)
    if not 0 <= port_num <= 65535:
        raise ValueError(f"port out of range in {text!r}")
    return host, port_num


# server


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        engine = self.server.engine
        self.server.active = self.request
        last_id = -1
        state: Optional[WorldState] = None
        for line in self.rfile:
            if not line.strip():
                continue
            msg_id = None
            try:
                msg = json.loads(line)
                if not isinstance(msg, dict):
                    raise ValueError("message must be an object")
                msg_id = msg.get("id")
                if isinstance(msg_id, bool) or not isinstance(msg_id, int):
                    raise ValueError("id must be an integer")
                if msg_id <= last_id:
                    raise ValueError(f"id {msg_id} is not greater than previous id {last_id}")
                last_id = msg_id
                op = msg.get("op")
                reply: dict[str, Any] = {"id": msg_id, "ok": True}
                if op == "info":
                    reply.update(role=engine.role.label, protocol=PROTOCOL_VERSION)
                elif op == "reset":
                    state = None
                elif op == "set_state":
                    state = state_from_wire(msg["state"])
                elif op == "get_state":
                    if state is None:
                        raise ValueError("no state has been set")
                    reply["state"] = state_to_wire(state)
                elif op == "step":
                    given = msg.get("state")
                    if given is None and state is None:
                        raise ValueError("step without a state")
                    frame = frame_from_wire(msg, None if given is not None else state)
                    frame = engine.step(frame)
                    state = frame.world
                    reply.update(frame_to_wire(frame))
                else:
                    raise ValueError(f"unknown op {op!r}")
            except Exception as exc:  # protocol violation or engine fault
                log.warning("engine server error: %s", exc)
                self._send({"id": msg_id, "ok": False, "error": f"{type(exc).__name__}: {exc}"})
                return
            self._send(reply)

    def _send(self, msg: dict) -> None:
        self.wfile.write(dumps(msg).encode("utf-8") + b"\n")
        self.wfile.flush()


class _Server(socketserver.TCPServer):
    allow_reuse_address = True
    active = None  # socket of the connection being served


class EngineServer:
    """Hosts one engine; connections are served one at a time, requests strictly in order."""

    def __init__(self, engine, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.engine = engine
        self._server = _Server((host, port), _Handler)
        self._server.engine = engine
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "EngineServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        # drop the live connection first, otherwise shutdown() waits for the client to hang up
        sock = self._server.active
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_engine(engine, endpoint: str = f"127.0.0.1:{DEFAULT_PORT}") -> EngineServer:
    host, port = parse_endpoint(endpoint)
    return EngineServer(engine, host, port).start()


# client


class EngineClient:
    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT):
        self.endpoint = endpoint
        self.host, self.port = parse_endpoint(endpoint)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._file = None
        self._next_id = 0

    def connect(self) -> None:
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except socket.timeout as exc:
            raise Timeout(f"connecting to {self.endpoint} timed out") from exc
        except OSError as exc:
            raise Disconnected(f"cannot connect to {self.endpoint}: {exc}") from exc
        self._file = self._sock.makefile("rwb")
        self._next_id = 0

    def request(self, op: str, **payload) -> dict:
        if self._sock is None:
            self.connect()
        msg_id = self._next_id
        self._next_id += 1
        line = dumps({"op": op, "id": msg_id, **payload}).encode("utf-8") + b"\n"
        try:
            self._file.write(line)
            self._file.flush()
            reply = self._file.readline()
        except socket.timeout as exc:
            self.close()
            raise Timeout(f"{op} to {self.endpoint} timed out after {self.timeout}s") from exc
        except OSError as exc:
            self.close()
            raise Disconnected(f"connection to {self.endpoint} lost: {exc}") from exc
        if not reply:
            self.close()
            raise Disconnected(f"{self.endpoint} closed the connection")
        msg = json.loads(reply)
        if msg.get("id") != msg_id:
            self.close()
            raise RemoteError(f"response id {msg.get('id')} does not match request id {msg_id}")
        if not msg.get("ok"):
            self.close()
            raise RemoteError(msg.get("error", "remote error"))
        return msg

    def close(self) -> None:
        for closable in (self._file, self._sock):
            if closable is not None:
                try:
                    closable.close()
                except OSError:
                    pass
        self._file = self._sock = None


@dataclass
class RemoteEngine:
    """Engine stand-in that forwards frames to a server; interchangeable with local engines."""

    role: EngineRole
    endpoint: str
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        self.client = EngineClient(self.endpoint, self.timeout)

    def step(self, frame: Frame) -> Frame:
        reply = self.client.request("step", **frame_to_wire(frame))
        return frame_from_wire(reply)

    def close(self) -> None:
        self.client.close()


def remote_engine_step(client, world: WorldState, command: Command) -> WorldState:
    engine = client if isinstance(client, RemoteEngine) else None
    if engine is not None:
        return engine.step(Frame(world, command)).world
    reply = client.request("step", **frame_to_wire(Frame(world, command)))
    return state_from_wire(reply["state"])
