"""Scheduler: alternate internal rewriting with batched approval, parallel
dispatch, and result substitution until the program is terminal.

The loop owns the program and runs single-threaded.  Workers (threads or
simulated) execute external calls and write each result into a
single-writer box; the loop blocks on "any box filled" only when no rewrite
applies and calls are still in flight.  Approval happens before dispatch:
a rejected batch means nothing from that batch (or after it) ever runs.
"""

from __future__ import annotations

import heapq
import itertools
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Union

from .ir import (
    AbsValue,
    FuncId,
    FuncTable,
    LeafSet,
    Program,
    TaskId,
    TupSet,
    Value,
    abs_canonical,
    validate,
    value_canonical,
)
from .rewrite import (
    AbstainError,
    Dispatchable,
    RewriteContext,
    RewriteError,
    applicable,
    find_dispatchable,
    has_abstract_ops,
    mark_pending,
    normalize,
    pending_site,
    remaining_calls,
    substitute_result,
    terminal_value,
)
from .toolsenv import EnvError, Environment, EnvResult

PREVIEW_LIMIT = 256


class RunError(Exception):
    pass


# ---------------------------------------------------------------------------
# task entries and boxes
# ---------------------------------------------------------------------------


class Box:
    """Single-writer result slot: empty until exactly one fill or fail."""

    def __init__(self):
        self.state = "empty"  # empty | filled | failed
        self.value: EnvResult | None = None
        self.error: str | None = None

    def fill(self, res: EnvResult) -> None:
        assert self.state == "empty", "box written twice"
        self.value = res
        self.state = "filled"

    def fail(self, error: str) -> None:
        assert self.state == "empty", "box written twice"
        self.error = error
        self.state = "failed"


@dataclass
class TaskEntry:
    task: TaskId
    site: tuple[int, ...]  # site at dispatch time; re-resolved at substitution
    func: FuncId
    fn_name: str
    arg: Value
    box: Box = field(default_factory=Box)


class ExecutionSet:
    """The in-flight external calls, keyed by task id."""

    def __init__(self):
        self.entries: dict[TaskId, TaskEntry] = {}

    def add(self, entry: TaskEntry) -> None:
        assert entry.task not in self.entries
        self.entries[entry.task] = entry

    def remove(self, task: TaskId) -> None:
        del self.entries[task]

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries.values(), key=lambda e: e.task))


# ---------------------------------------------------------------------------
# approval
# ---------------------------------------------------------------------------


def preview(v: Value) -> str:
    s = value_canonical(v)
    if len(s) <= PREVIEW_LIMIT:
        return s
    return s[:PREVIEW_LIMIT] + f"...(+{len(s) - PREVIEW_LIMIT} chars)"


@dataclass(frozen=True)
class ApprovalCall:
    fn: str
    args: str
    site: str

    def as_json(self) -> dict:
        return {"fn": self.fn, "args": self.args, "site": self.site}


@dataclass(frozen=True)
class ApprovalBatch:
    batch_id: int
    calls: tuple[ApprovalCall, ...]

    def as_json(self) -> dict:
        return {"batch_id": self.batch_id, "calls": [c.as_json() for c in self.calls]}


class Approver(Protocol):
    def decide(self, batch: ApprovalBatch) -> bool: ...


class AutoApprover:
    def __init__(self, approve: bool = True):
        self.approve = approve

    def decide(self, batch: ApprovalBatch) -> bool:
        return self.approve


class ScriptedApprover:
    """Answers from a fixed list; defaults to reject when exhausted."""

    def __init__(self, decisions: list[bool]):
        self.decisions = list(decisions)
        self.seen: list[ApprovalBatch] = []

    def decide(self, batch: ApprovalBatch) -> bool:
        self.seen.append(batch)
        if self.decisions:
            return self.decisions.pop(0)
        return False


class PromptApprover:
    """Interactive terminal approver."""

    def decide(self, batch: ApprovalBatch) -> bool:
        print(f"approval batch {batch.batch_id}:")
        for c in batch.calls:
            print(f"  {c.fn}({c.args})")
        while True:
            answer = input("approve all? [y/n] ").strip().lower()
            if answer in ("y", "yes"):
                return True
            if answer in ("n", "no"):
                return False


# ---------------------------------------------------------------------------
# executors
# ---------------------------------------------------------------------------


class Executor(Protocol):
    def submit(self, entry: TaskEntry, env: Environment) -> None: ...
    def wait_any(self) -> None: ...
    @property
    def makespan_ms(self) -> float: ...


class VirtualExecutor:
    """Discrete-event executor: calls are evaluated at submit time, but
    their boxes fill only when the virtual clock reaches start + latency.
    ``workers=None`` means unbounded parallelism; ``workers=1`` is a
    sequential executor whose makespan is the sum of latencies."""

    def __init__(self, workers: int | None = None):
        if workers is not None and workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.now_ms = 0.0
        self._heap: list[tuple[float, int, TaskEntry, EnvResult | None, str | None]] = []
        self._seq = itertools.count()
        self._worker_free: list[float] = [0.0] * workers if workers else []

    def submit(self, entry: TaskEntry, env: Environment) -> None:
        try:
            res: EnvResult | None = env.call(entry.fn_name, entry.arg)
            err = None
            latency = res.latency_ms
        except EnvError as exc:
            res, err, latency = None, str(exc), 0.0
        if self.workers is None:
            start = self.now_ms
        else:
            i = min(range(self.workers), key=lambda j: self._worker_free[j])
            start = max(self.now_ms, self._worker_free[i])
            self._worker_free[i] = start + latency
        heapq.heappush(self._heap, (start + latency, next(self._seq), entry, res, err))

    def wait_any(self) -> None:
        if not self._heap:
            raise RunError("wait with no calls in flight")
        finish, _, entry, res, err = heapq.heappop(self._heap)
        self.now_ms = max(self.now_ms, finish)
        if err is None:
            assert res is not None
            entry.box.fill(res)
        else:
            entry.box.fail(err)

    @property
    def makespan_ms(self) -> float:
        return self.now_ms


class ThreadExecutor:
    """Real-clock executor: one thread per call, sleeping the environment's
    latency scaled by ``scale`` (0 disables sleeping)."""

    def __init__(self, scale: float = 1.0):
        self.scale = scale
        self._done: queue.Queue[TaskEntry] = queue.Queue()
        self._in_flight = 0
        self._lock = threading.Lock()
        self._t0 = time.monotonic()
        self._last = self._t0

    def submit(self, entry: TaskEntry, env: Environment) -> None:
        with self._lock:
            self._in_flight += 1

        def work():
            try:
                res = env.call(entry.fn_name, entry.arg)
                if self.scale > 0:
                    time.sleep(res.latency_ms * self.scale / 1000.0)
                entry.box.fill(res)
            except EnvError as exc:
                entry.box.fail(str(exc))
            finally:
                self._done.put(entry)

        threading.Thread(target=work, daemon=True).start()

    def wait_any(self) -> None:
        with self._lock:
            if self._in_flight == 0:
                raise RunError("wait with no calls in flight")
        self._done.get()
        with self._lock:
            self._in_flight -= 1
        self._last = time.monotonic()

    @property
    def makespan_ms(self) -> float:
        return (self._last - self._t0) * 1000.0


# ---------------------------------------------------------------------------
# outcomes
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    rounds: int = 0  # approval batches shown to the user
    per_call: int = 0  # effectful calls executed
    executed: list[tuple[str, str]] = field(default_factory=list)
    makespan_ms: float = 0.0
    trace: list[dict] = field(default_factory=list)

    @property
    def batched(self) -> int:
        return self.rounds


@dataclass
class Result:
    value: Union[Value, AbsValue]
    report: RunReport


@dataclass
class Rejected:
    batch_id: int
    report: RunReport


@dataclass
class Failed:
    error: str
    abstain: bool = False
    report: RunReport | None = None


RunOutcome = Union[Result, Rejected, Failed]


class _TaskFailure(Exception):
    def __init__(self, entry: TaskEntry, error: str):
        super().__init__(f"{entry.fn_name} at site {entry.site}: {error}")


# ---------------------------------------------------------------------------
# the scheduler loop
# ---------------------------------------------------------------------------


def _site_str(site: tuple[int, ...]) -> str:
    return ".".join(str(i) for i in site)


def dispatch_batch(calls: list[Dispatchable], ctx: RewriteContext, env: Environment,
                   executor: Executor, exec_set: ExecutionSet,
                   task_ids) -> list[TaskEntry]:
    """Start every call concurrently; pending markers replace the calls."""
    entries = []
    for d in calls:
        task = next(task_ids)
        name = ctx.ft.get(d.func).name
        entry = TaskEntry(task, d.site, d.func, name, d.arg)
        mark_pending(ctx, d.site, task)
        exec_set.add(entry)
        ctx.emit({"event": "dispatch", "task": task, "fn": name,
                  "args": preview(d.arg), "site": _site_str(d.site)})
        executor.submit(entry, env)
        entries.append(entry)
    return entries


def run_internal(ctx: RewriteContext, exec_set: ExecutionSet, executor: Executor,
                 report: RunReport | None = None,
                 step_budget: int | None = None) -> Program:
    """Substitute filled boxes and apply rules until the execution set is
    drained and no rule applies; block on completions in between."""
    while True:
        progressed = False
        for entry in list(exec_set):
            if entry.box.state == "failed":
                raise _TaskFailure(entry, entry.box.error or "call failed")
            if entry.box.state == "filled":
                site = pending_site(ctx, entry.task)
                if site is None:
                    raise RunError(f"no pending marker for task {entry.task}")
                res = entry.box.value
                assert res is not None
                substitute_result(ctx, site, res.result)
                exec_set.remove(entry.task)
                if report is not None:
                    report.executed.append((entry.fn_name, value_canonical(entry.arg)))
                    report.per_call += 1
                ctx.emit({"event": "complete", "task": entry.task, "fn": entry.fn_name,
                          "latency_ms": res.latency_ms})
                progressed = True
        if step_budget is None:
            normalize(ctx)
        else:
            normalize(ctx, step_budget)
        if not exec_set:
            return ctx.program
        if not progressed:
            executor.wait_any()


def render_result(value: Union[Value, AbsValue]) -> str:
    if isinstance(value, (LeafSet, TupSet)):
        return abs_canonical(value)
    return value_canonical(value)


def run(p: Program, ft: FuncTable, env: Environment,
        approver: Approver | None = None,
        executor: Executor | None = None,
        mode: str = "concrete",
        trace: Callable[[dict], None] | None = None,
        step_budget: int | None = None) -> RunOutcome:
    """Execute a program to completion, rejection, or failure."""
    diags = validate(p, ft)
    if diags:
        raise ValueError("program does not validate: " + "; ".join(map(str, diags)))
    approver = approver or AutoApprover()
    executor = executor or VirtualExecutor()
    report = RunReport()

    def emit(event: dict) -> None:
        report.trace.append(event)
        if trace is not None:
            trace(event)

    ctx = RewriteContext(p, ft, mode=mode, trace=emit)
    exec_set = ExecutionSet()
    task_ids = itertools.count(1)
    batch_ids = itertools.count(1)

    def finish(outcome: RunOutcome, event: dict) -> RunOutcome:
        report.makespan_ms = executor.makespan_ms
        emit({"event": "result", **event})
        return outcome

    try:
        while True:
            run_internal(ctx, exec_set, executor, report, step_budget)
            dispatchable = find_dispatchable(ctx)
            if not dispatchable:
                break
            needs_approval = [d for d in dispatchable if not ctx.ft.get(d.func).pre_approved]
            if needs_approval:
                batch = ApprovalBatch(next(batch_ids), tuple(
                    ApprovalCall(ctx.ft.get(d.func).name, preview(d.arg), _site_str(d.site))
                    for d in needs_approval))
                emit({"event": "batch", **batch.as_json()})
                if not approver.decide(batch):
                    return finish(Rejected(batch.batch_id, report),
                                  {"outcome": "rejected", "batch_id": batch.batch_id})
                report.rounds += 1
            dispatch_batch(dispatchable, ctx, env, executor, exec_set, task_ids)
    except _TaskFailure as exc:
        return finish(Failed(str(exc), report=report),
                      {"outcome": "failed", "error": str(exc)})
    except AbstainError as exc:
        return finish(Failed(str(exc), abstain=True, report=report),
                      {"outcome": "failed", "error": str(exc)})
    except RewriteError as exc:
        return finish(Failed(str(exc), report=report),
                      {"outcome": "failed", "error": str(exc)})

    value = terminal_value(ctx)
    if value is None:
        stuck = remaining_calls(ctx.program)
        if mode == "conformal" and (has_abstract_ops(ctx.program) or stuck):
            msg = ("external call received a set-valued argument" if stuck
                   else "result is not representable as an abstract value")
            return finish(Failed(msg, abstain=True, report=report),
                          {"outcome": "failed", "error": msg})
        msg = "program is stuck: no rule applies and the result is unresolved"
        return finish(Failed(msg, report=report), {"outcome": "failed", "error": msg})
    return finish(Result(value, report),
                  {"outcome": "result", "value": render_result(value)})


def count_interactions(p: Program, ft: FuncTable, env: Environment,
                       policy: str = "batched", mode: str = "concrete") -> int:
    """Approvals needed under one-at-a-time vs batched policies."""
    if policy not in ("per_call", "batched"):
        raise ValueError(f"bad policy {policy!r}")
    outcome = run(p, ft, env, AutoApprover(), VirtualExecutor(), mode=mode)
    if not isinstance(outcome, Result):
        raise RunError(f"cannot count interactions: {outcome}")
    return outcome.report.per_call if policy == "per_call" else outcome.report.batched
