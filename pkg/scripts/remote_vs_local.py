#!/usr/bin/env python3
"""Run a scenario with local physics and with physics behind `serve-engine`, then compare the logs."""

import argparse
import json
import os
import signal
import subprocess
import sys
import tempfile
from pathlib import Path


def taskseq(*argv, **kw):
    return subprocess.run([sys.executable, "-m", "taskseq", *map(str, argv)], **kw)


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default="scenarios/pick_and_place.json")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    server = subprocess.Popen([sys.executable, "-m", "taskseq", "serve-engine", "--role", "physics", "--port", "0"],
                              stdout=subprocess.PIPE, text=True, env=dict(os.environ, PYTHONUNBUFFERED="1"))
    endpoint = server.stdout.readline().split()[-1]
    try:
        src = Path(args.scenario).resolve()
        doc = json.loads(src.read_text())
        doc["engines"] = {"physics": {"backend": "remote", "endpoint": endpoint}}
        with tempfile.TemporaryDirectory() as tmp:
            remote = src.parent / f".remote_{src.name}"  # next to the original so relative policy paths resolve
            remote.write_text(json.dumps(doc, indent=2))
            try:
                for seed in range(args.seeds):
                    a, b = Path(tmp, f"l{seed}"), Path(tmp, f"r{seed}")
                    taskseq("run", src, "--seed", seed, "--out", a, stdout=subprocess.DEVNULL)
                    taskseq("run", remote, "--seed", seed, "--out", b, stdout=subprocess.DEVNULL)
                    la, lb = (a / "trajectory.log").read_bytes(), (b / "trajectory.log").read_bytes()
                    lines = len(la.splitlines())
                    print(f"seed {seed}: {lines} lines, identical={la == lb}")
            finally:
                remote.unlink()
    finally:
        server.send_signal(signal.SIGTERM)
        server.wait()


if __name__ == "__main__":
    run()
