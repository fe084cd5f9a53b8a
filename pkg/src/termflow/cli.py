"""Command-line entry point.

Subcommands:
    transpile <src>       emit canonical IR text
    run <src>             transpile and execute; prints outcome and rounds
    bench <src> --log F   replay a recorded log sequentially vs in parallel
    calibrate --tasks F   pick tau on a grid from validation tasks
    conformal-run <src>   execute set-valued; prints output set and certainty

Exit codes: 0 ok, 2 parse/usage, 3 validation, 4 rejected, 5 runtime failure.
``TERMFLOW_SEED`` and ``TERMFLOW_PORT`` override the corresponding flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading
from pathlib import Path

from .conformal import (
    ConformalConfig,
    ConformalEnv,
    certainty,
    errors_from_misses,
    load_calibration_tasks,
    miss_matrix,
    output_contains,
    select_tau,
    task_miss,
)
from .ir import serialize, validate
from .rewrite import RewriteError
from .runtime import (
    AutoApprover,
    Failed,
    PromptApprover,
    Rejected,
    Result,
    ThreadExecutor,
    VirtualExecutor,
    render_result,
    run,
)
from .server import HttpApprover, start_server
from .toolsenv import (
    EnvError,
    FixtureEnv,
    RecordingEnv,
    ReplayEnv,
    mock_env,
    save_log,
)
from .transpiler import SourceError, transpile

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_REJECTED = 4
EXIT_RUNTIME = 5

DEFAULT_TAU_GRID = (0.6, 1.0, 1.4, 1.8)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("TERMFLOW_SEED", "0"))


def _inputs(args, env) -> dict:
    inputs = dict(getattr(env, "inputs", {}) or {})
    if getattr(args, "inputs", None):
        try:
            inputs.update(json.loads(args.inputs))
        except ValueError as exc:
            raise CliError(f"bad --inputs JSON: {exc}", EXIT_PARSE) from exc
    return inputs


def _environment(args):
    if getattr(args, "env", None):
        return FixtureEnv.load(args.env)
    return mock_env(_seed(args))


def _executor(spec: str):
    if spec == "virtual":
        return VirtualExecutor()
    if spec == "real":
        return ThreadExecutor()
    if spec.startswith("real:"):
        try:
            return ThreadExecutor(scale=float(spec.split(":", 1)[1]))
        except ValueError as exc:
            raise CliError(f"bad --clock scale: {spec!r}", EXIT_PARSE) from exc
    raise CliError(f"bad --clock {spec!r} (virtual | real[:scale])", EXIT_PARSE)


def _approver(spec: str):
    """Returns (approver, server or None)."""
    if spec == "auto":
        return AutoApprover(), None
    if spec == "prompt":
        return PromptApprover(), None
    if spec == "serve" or spec.startswith("serve:"):
        if spec == "serve":
            port_text = os.environ.get("TERMFLOW_PORT")
            if port_text is None:
                raise CliError("--approver serve needs a port "
                               "(serve:PORT or TERMFLOW_PORT)", EXIT_PARSE)
        else:
            port_text = spec.split(":", 1)[1]
        try:
            port = int(port_text)
        except ValueError as exc:
            raise CliError(f"bad approval port {port_text!r}", EXIT_PARSE) from exc
        approver = HttpApprover()
        server = start_server(approver, port)
        host, bound = server.server_address[:2]
        print(f"approval server listening on http://{host}:{bound}", file=sys.stderr)
        return approver, server
    raise CliError(f"bad --approver {spec!r} (auto | prompt | serve:PORT)", EXIT_PARSE)


def _conformal_config(args) -> ConformalConfig:
    try:
        thresholds = json.loads(args.base_thresholds) if args.base_thresholds else {}
    except ValueError as exc:
        raise CliError(f"bad --base-thresholds JSON: {exc}", EXIT_PARSE) from exc
    grid = tuple(args.tau_grid) if args.tau_grid else DEFAULT_TAU_GRID
    tau = args.tau if args.tau is not None else grid[0]
    return ConformalConfig(thresholds, grid, tau, args.alpha,
                           detection_certain_threshold=args.certain_threshold)


def _transpile_file(args, inputs):
    path = Path(args.src)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_PARSE) from exc
    program, ft = transpile(text, str(path), inputs=inputs,
                            loop_budget=args.loop_budget)
    diags = validate(program, ft)
    if diags:
        for d in diags:
            print(d, file=sys.stderr)
        raise CliError("lowered program failed validation", EXIT_VALIDATION)
    return program, ft


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_transpile(args) -> int:
    env = _environment(args) if args.env else None
    inputs = _inputs(args, env)
    program, ft = _transpile_file(args, inputs)
    text = serialize(program, ft)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _execute(args, mode: str):
    env = _environment(args)
    inputs = _inputs(args, env)
    program, ft = _transpile_file(args, inputs)

    if mode == "conformal":
        if args.tau is None:
            raise CliError("conformal mode requires an explicit --tau", EXIT_PARSE)
        if args.record:
            raise CliError("--record only applies to concrete runs", EXIT_PARSE)
        if not hasattr(env, "scored"):
            raise CliError("this environment cannot produce scored outputs", EXIT_PARSE)
        env = ConformalEnv(env, _conformal_config(args))

    recorder = None
    if args.record:
        recorder = RecordingEnv(env)
        env = recorder

    approver, server = _approver(args.approver)
    executor = _executor(args.clock)
    events: list[dict] = []

    def trace(event: dict) -> None:
        events.append(event)
        if isinstance(approver, HttpApprover):
            approver.record(event)

    outcome = run(program, ft, env, approver=approver, executor=executor,
                  mode=mode, trace=trace)
    if recorder is not None:
        save_log(recorder.records, args.record)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for event in events:
                fh.write(json.dumps(event) + "\n")
    return outcome, server


def _linger(args, server) -> None:
    if server is not None and args.linger:
        print("run finished; serving /trace until interrupted", file=sys.stderr)
        sys.stdout.flush()
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            pass


def cmd_run(args) -> int:
    outcome, server = _execute(args, args.mode)
    code = EXIT_OK
    if isinstance(outcome, Result):
        if args.json:
            print(json.dumps({"outcome": "result",
                              "value": render_result(outcome.value),
                              "rounds": outcome.report.rounds,
                              "per_call": outcome.report.per_call,
                              "makespan_ms": outcome.report.makespan_ms}))
        else:
            print(f"Result: {render_result(outcome.value)}")
            print(f"approval rounds: {outcome.report.rounds}")
    elif isinstance(outcome, Rejected):
        if args.json:
            print(json.dumps({"outcome": "rejected", "batch_id": outcome.batch_id}))
        else:
            print(f"Rejected: batch {outcome.batch_id}")
        code = EXIT_REJECTED
    else:
        assert isinstance(outcome, Failed)
        if args.json:
            print(json.dumps({"outcome": "failed", "error": outcome.error,
                              "abstain": outcome.abstain}))
        else:
            print(f"Failed: {outcome.error}")
        code = EXIT_RUNTIME
    _linger(args, server)
    return code


def cmd_conformal_run(args) -> int:
    outcome, server = _execute(args, "conformal")
    code = EXIT_OK
    if isinstance(outcome, Result):
        cert = certainty(outcome.value)
        if args.json:
            print(json.dumps({"outcome": "result",
                              "value": render_result(outcome.value),
                              "certainty": cert,
                              "rounds": outcome.report.rounds}))
        else:
            print(f"Output set: {render_result(outcome.value)}")
            print(f"certainty: {cert}")
            print(f"approval rounds: {outcome.report.rounds}")
    elif isinstance(outcome, Rejected):
        print(f"Rejected: batch {outcome.batch_id}")
        code = EXIT_REJECTED
    else:
        assert isinstance(outcome, Failed)
        label = "Abstained" if outcome.abstain else "Failed"
        if args.json:
            print(json.dumps({"outcome": "failed", "error": outcome.error,
                              "abstain": outcome.abstain}))
        else:
            print(f"{label}: {outcome.error}")
        code = EXIT_RUNTIME
    _linger(args, server)
    return code


def cmd_bench(args) -> int:
    log = Path(args.log)
    if not log.exists():
        raise CliError(f"log file {log} does not exist", EXIT_RUNTIME)
    inputs = _inputs(args, None)
    program, ft = _transpile_file(args, inputs)

    def replay_run(executor):
        outcome = run(program, ft, ReplayEnv.load(log), approver=AutoApprover(),
                      executor=executor)
        if not isinstance(outcome, Result):
            detail = getattr(outcome, "error", outcome)
            raise CliError(f"replay did not produce a result: {detail}")
        return outcome

    sequential = replay_run(VirtualExecutor(workers=1))
    parallel = replay_run(VirtualExecutor())
    seq_ms = sequential.report.makespan_ms
    par_ms = parallel.report.makespan_ms
    reduction = 100.0 * (seq_ms - par_ms) / seq_ms if seq_ms else 0.0
    per_call = parallel.report.per_call
    batched = parallel.report.batched
    fewer = 100.0 * (per_call - batched) / per_call if per_call else 0.0

    row = {"case": Path(args.src).stem, "sequential_ms": round(seq_ms, 3),
           "parallel_ms": round(par_ms, 3), "reduction_pct": round(reduction, 1),
           "per_call": per_call, "batched": batched,
           "interaction_reduction_pct": round(fewer, 1)}
    if args.json:
        print(json.dumps(row))
    else:
        print(f"sequential: {seq_ms:.1f} ms")
        print(f"parallel: {par_ms:.1f} ms")
        print(f"reduction: {reduction:.1f}%")
        print(f"interactions: {per_call} per-call vs {batched} batched "
              f"({fewer:.1f}% fewer)")
    if args.report:
        from .report import write_bench_report

        for path in write_bench_report(args.report, [row]):
            print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    tasks = load_calibration_tasks(args.tasks)
    cfg = _conformal_config(args)
    misses = miss_matrix(tasks, cfg)
    errors = errors_from_misses(misses)
    chosen = select_tau(cfg.tau_grid, errors, cfg.alpha)

    chosen_cfg = cfg.with_tau(chosen)
    certain = 0
    for task in tasks:
        from .runtime import run as run_program

        outcome = run_program(task.program, task.ft,
                              ConformalEnv(task.env, chosen_cfg), mode="conformal")
        if isinstance(outcome, Result) and certainty(outcome.value) == "certain":
            certain += 1
    certainty_rate = certain / len(tasks)

    if args.json:
        print(json.dumps({"tau_errors": [[t, e] for t, e in zip(cfg.tau_grid, errors)],
                          "chosen_tau": chosen, "alpha": cfg.alpha,
                          "tasks": len(tasks), "certainty_rate": certainty_rate}))
    else:
        print(f"{'tau':>6}  {'error':>7}")
        for tau, err in zip(cfg.tau_grid, errors):
            marker = " *" if tau == chosen else ""
            print(f"{tau:>6g}  {err:>7.3f}{marker}")
        print(f"chosen tau: {chosen:g} (alpha {cfg.alpha:g}, {len(tasks)} tasks)")
        print(f"certainty rate at chosen tau: {certainty_rate:.1%}")
    if args.report:
        from .report import write_calibration_report

        for path in write_calibration_report(args.report,
                                             list(zip(cfg.tau_grid, errors)),
                                             chosen, cfg.alpha, certainty_rate):
            print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_common_source_flags(sp):
    sp.add_argument("src", help="source program path")
    sp.add_argument("--inputs", help="JSON object of input bindings")
    sp.add_argument("--loop-budget", type=int, default=1000,
                    help="max while-loop iterations (default 1000)")


def _add_run_flags(sp):
    sp.add_argument("--env", help="fixture JSON path (default: seeded mock)")
    sp.add_argument("--seed", type=int, default=None,
                    help="mock environment seed (TERMFLOW_SEED)")
    sp.add_argument("--approver", default="auto",
                    help="auto | prompt | serve:PORT (default auto)")
    sp.add_argument("--clock", default="virtual",
                    help="virtual | real[:scale] (default virtual)")
    sp.add_argument("--record", help="write an external-call log to this path")
    sp.add_argument("--trace", help="write run events (JSONL) to this path")
    sp.add_argument("--linger", action="store_true",
                    help="with serve: keep the HTTP endpoint up after the run")
    sp.add_argument("--json", action="store_true", help="machine-readable output")


def _add_conformal_flags(sp):
    sp.add_argument("--tau", type=float, default=None, help="threshold scale")
    sp.add_argument("--tau-grid", type=float, nargs="+", default=None,
                    help=f"calibration grid (default {' '.join(map(str, DEFAULT_TAU_GRID))})")
    sp.add_argument("--alpha", type=float, default=0.1,
                    help="target error rate (default 0.1)")
    sp.add_argument("--base-thresholds",
                    help='JSON object, e.g. \'{"find": 0.5, "simple_query": 0.5}\'')
    sp.add_argument("--certain-threshold", type=float, default=0.9,
                    help="detection score treated as certainly present (default 0.9)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="termflow",
        description="Transpile, execute, and calibrate tool-calling programs.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("transpile", help="emit canonical IR text")
    _add_common_source_flags(sp)
    sp.add_argument("--env", help="fixture JSON supplying input bindings")
    sp.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    sp.add_argument("-o", "--output", help="write IR here instead of stdout")
    sp.set_defaults(fn=cmd_transpile)

    sp = sub.add_parser("run", help="transpile and execute a program")
    _add_common_source_flags(sp)
    _add_run_flags(sp)
    _add_conformal_flags(sp)
    sp.add_argument("--mode", choices=("concrete", "conformal"), default="concrete")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("conformal-run", help="execute with set-valued semantics")
    _add_common_source_flags(sp)
    _add_run_flags(sp)
    _add_conformal_flags(sp)
    sp.set_defaults(fn=cmd_conformal_run)

    sp = sub.add_parser("bench", help="replay a log sequentially vs in parallel")
    _add_common_source_flags(sp)
    sp.add_argument("--log", required=True, help="recorded external-call log")
    sp.add_argument("--clock", default="virtual", help=argparse.SUPPRESS)
    sp.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.add_argument("--report", help="write bench.csv and figures to this directory")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("calibrate", help="pick tau from validation tasks")
    sp.add_argument("--tasks", required=True, help="JSONL task records")
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.add_argument("--report", help="write calibration.csv and figures here")
    _add_conformal_flags(sp)
    sp.set_defaults(fn=cmd_calibrate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SourceError as exc:
        for diag in exc.diagnostics:
            print(diag, file=sys.stderr)
        return EXIT_PARSE
    except EnvError as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RewriteError as exc:
        print(f"rewrite error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
