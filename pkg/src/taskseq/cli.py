"""Command line: validate / run / train / evaluate / serve-engine."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Optional

from . import wire
from .engines import EngineError, EngineRole
from .learning import EpisodeObjective, ResetExhausted, cem_train, evaluate
from .scenario import (
    LOCAL,
    ParseError,
    PipelineFactory,
    Scenario,
    ScenarioError,
    build_pipeline,
    build_registry,
    load_scenario,
    validate_scenario,
    with_seed,
    write_params,
)
from .sequencer import TaskSequence, run_sequence
from .world import DEFAULT_DISTANCE_SIGMA

log = logging.getLogger("taskseq")

EXIT_OK = 0
EXIT_SCENARIO = 1
EXIT_RUNTIME = 2


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(path: str, seed: Optional[int]) -> Scenario:
    return with_seed(load_scenario(path), seed)


def cmd_validate(args) -> int:
    s = _load(args.scenario, None)
    diags = validate_scenario(s)
    for d in diags:
        _err(f"{args.scenario}: {d}")
    if not diags:
        print(f"{args.scenario}: ok")
    return EXIT_SCENARIO if diags else EXIT_OK


def cmd_run(args) -> int:
    s = _load(args.scenario, args.seed)
    if s.mode != "execute":
        _err(f"{args.scenario}: run needs an execute-mode scenario (mode is {s.mode!r})")
        return EXIT_SCENARIO
    registry = build_registry(s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline = build_pipeline(s, args.timeout)
    try:
        result = run_sequence(TaskSequence(s.sequence), None, registry, pipeline, s.seed)
    finally:
        pipeline.close()
    lines = result.log_lines()
    (out / s.output.trajectory).write_text("\n".join(lines) + "\n")
    print(lines[-1])
    if not result.outcome.success:
        _err(f"outcome: {result.outcome}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args) -> int:
    s = _load(args.scenario, args.seed)
    if s.mode != "train":
        _err(f"{args.scenario}: train needs a train-mode scenario (mode is {s.mode!r})")
        return EXIT_SCENARIO
    if any(e.backend == "remote" for e in s.engines.values()):
        _err(f"{args.scenario}: training runs on local engines; remote backends are ignored")
    registry = build_registry(s)
    block = registry[s.train_task]
    objective = EpisodeObjective(s.task_sequence(), registry, PipelineFactory(s.distance_noise), s.reward)
    workers = args.workers or os.cpu_count() or 1
    report = cem_train(objective, block.model.param_dim, s.train, workers=workers)
    log.info("training took %.1f s on %d worker(s)", report.wall_clock, workers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_params(out / s.output.params, block.model.family, report.params)
    # wall-clock time is left out so that identical inputs give identical files
    lines = [
        wire.dumps(
            {
                "iteration": st.iteration,
                "mean_return": wire.hexfloat(st.mean_return),
                "best_return": wire.hexfloat(st.best_return),
                "best_so_far": wire.hexfloat(st.best_so_far),
                "mean": [wire.hexfloat(v) for v in st.mean],
                "sigma": [wire.hexfloat(v) for v in st.sigma],
            }
        )
        for st in report.iterations
    ]
    final = {"final": {"params": s.output.params, "best_return": wire.hexfloat(report.best_return)}}
    lines.append(wire.dumps(final))
    (out / s.output.metrics).write_text("\n".join(lines) + "\n")
    print(json.dumps({"params": str(out / s.output.params), "best_return": report.best_return}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    s = _load(args.scenario, args.seed)
    registry = build_registry(s)
    params = None
    task_id = None
    if s.mode == "train":
        if not args.params:
            _err("evaluating a train-mode scenario needs --params")
            return EXIT_SCENARIO
        from .scenario import read_params

        task_id = s.train_task
        model = registry[task_id].model
        params = read_params(args.params, model.family, model.param_dim)
    pipeline = build_pipeline(s, args.timeout)
    try:
        rate = evaluate(params, TaskSequence(s.sequence), registry, pipeline, args.episodes, s.seed, task_id)
    finally:
        pipeline.close()
    print(json.dumps({"episodes": args.episodes, "seed": s.seed, "success_rate": rate}))
    return EXIT_OK


def cmd_serve(args) -> int:
    role = EngineRole.parse(args.role)
    shim = Scenario(tasks=(), sequence=(), distance_noise=args.distance_noise)
    engine = LOCAL[role](shim)
    host, port = wire.parse_endpoint(f"{args.host}:{args.port}" if args.port is not None else args.host)
    server = wire.EngineServer(engine, host, port)
    print(f"serving {role.label} engine on {server.endpoint}", flush=True)
    signal.signal(signal.SIGTERM, lambda *_: (_ for _ in ()).throw(KeyboardInterrupt()))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")

    p = argparse.ArgumentParser(prog="taskseq", description="Task-sequencing simulator for learning and execution.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", parents=[common], help="check a scenario file")
    v.add_argument("scenario")
    v.set_defaults(fn=cmd_validate)

    def scenario_cmd(name, fn, help_):
        c = sub.add_parser(name, parents=[common], help=help_)
        c.add_argument("scenario")
        c.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        c.add_argument("--out", default=".", help="output directory")
        c.add_argument("--timeout", type=float, default=wire.DEFAULT_TIMEOUT, help="remote engine timeout (s)")
        c.set_defaults(fn=fn)
        return c

    scenario_cmd("run", cmd_run, "execute a sequence once and write trajectory.log")
    t = scenario_cmd("train", cmd_train, "train the task-under-training, write metrics.log and policy.params")
    t.add_argument("--workers", type=int, default=None, help="parallel workers (default: all cores)")
    e = scenario_cmd("evaluate", cmd_evaluate, "success rate over seeded execute-mode episodes")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--params", default=None, help="params file for the train task of a train-mode scenario")

    srv = sub.add_parser("serve-engine", parents=[common], help="host one pipeline engine over TCP")
    srv.add_argument("--role", required=True, choices=[r.label for r in EngineRole])
    srv.add_argument("--port", type=int, default=None, help="port (default TASKSEQ_PORT or 7471; 0 picks a free port)")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--distance-noise", type=float, default=DEFAULT_DISTANCE_SIGMA)
    srv.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except ParseError as exc:
        _err(f"{getattr(args, 'scenario', '')}:{exc}")
        return EXIT_SCENARIO
    except ScenarioError as exc:
        for d in exc.diagnostics:
            _err(f"{args.scenario}: {d}")
        return EXIT_SCENARIO
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_SCENARIO
    except EngineError as exc:
        _err(f"runtime failure: {exc} ({type(exc.cause).__name__})")
        return EXIT_RUNTIME
    except (wire.WireError, ResetExhausted, OSError, RuntimeError) as exc:
        _err(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
