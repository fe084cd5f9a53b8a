"""Tool environments: seeded mocks, fixtures, and record/replay.

An environment answers external calls with a result and a latency.  The
latency is data, not elapsed time; executors decide whether to simulate it
(virtual clock) or sleep it (real clock).  Mock environments derive
everything from a hash of (seed, function, canonical argument), so equal
calls always agree and runs are reproducible without stored state.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .ir import (
    AbsListResult,
    CallResult,
    Const,
    Leaf,
    LeafSet,
    Tup,
    Value,
    py_to_value,
    value_canonical,
)

LLM_VOCAB = ("red", "blue", "green", "yellow", "left", "right", "one", "two")
WORDS = ("cat", "dog", "cup", "box", "sky", "car")


class EnvError(Exception):
    """The environment cannot serve a call (unknown function, bad arity)."""


class ReplayMiss(EnvError):
    """A replayed call was not found in the log's remaining records."""


@dataclass(frozen=True)
class EnvResult:
    result: CallResult
    latency_ms: float


@dataclass(frozen=True)
class ScoredCall:
    """Raw model output before any thresholding.

    kind 'classify': candidates are (label, score) over a closed label set.
    kind 'detect': candidates are (token, score) in detector order.
    kind 'value': plain result, no scores (candidates empty).
    """

    kind: str
    candidates: tuple[tuple[Const, float], ...]
    value: CallResult | None
    latency_ms: float


class Environment(Protocol):
    def call(self, fn: str, arg: Value) -> EnvResult: ...


class ScoredEnvironment(Environment, Protocol):
    def scored(self, fn: str, arg: Value) -> ScoredCall: ...


def _arg_items(arg: Value) -> tuple:
    """Call arguments as a flat host tuple (single non-tuple arg allowed)."""
    if isinstance(arg, Tup):
        return tuple(_py(i) for i in arg.items)
    return (_py(arg),)


def _py(v: Value):
    if isinstance(v, Leaf):
        return v.c
    return tuple(_py(i) for i in v.items)


# ---------------------------------------------------------------------------
# seeded mock environment
# ---------------------------------------------------------------------------


class MockEnv:
    """Deterministic stand-in for detector / query / LLM tools.

    Functions: `.find(image, query)` (detection), `.simple_query(patch,
    question)` (yes/no classification), `.llm_query(text)` (small-vocabulary
    classification), and plain-valued `.query_int`, `.query_bool`,
    `.query_str`, `.query_list` used by generated test corpora.
    """

    # scores at or above this are "present" for the concrete detector
    DETECT_THRESHOLD = 0.5

    def __init__(self, seed: int):
        self.seed = seed

    def _rng(self, fn: str, arg: Value) -> random.Random:
        key = f"{self.seed}|{fn}|{value_canonical(arg)}"
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def scored(self, fn: str, arg: Value) -> ScoredCall:
        rng = self._rng(fn, arg)
        latency = rng.uniform(20.0, 120.0)
        args = _arg_items(arg)
        if fn == ".find":
            if len(args) != 2:
                raise EnvError(f".find expects (image, query), got {len(args)} args")
            image, query = args
            tag = str(query).replace(" ", "_")
            n = rng.randint(0, 4)
            cands = tuple(
                (f"{image}/{tag}/p{i}", round(rng.uniform(0.25, 0.99), 4)) for i in range(n))
            return ScoredCall("detect", cands, None, latency)
        if fn == ".simple_query":
            p_yes = round(rng.uniform(0.05, 0.95), 4)
            cands = (("yes", p_yes), ("no", round(1.0 - p_yes, 4)))
            return ScoredCall("classify", cands, None, latency)
        if fn == ".llm_query":
            raw = [rng.random() for _ in LLM_VOCAB]
            total = sum(raw)
            cands = tuple(
                (w, round(r / total, 4)) for w, r in zip(LLM_VOCAB, raw))
            return ScoredCall("classify", cands, None, latency)
        if fn == ".query_int":
            return ScoredCall("value", (), Leaf(rng.randint(0, 9)), latency)
        if fn == ".query_bool":
            return ScoredCall("value", (), Leaf(rng.random() < 0.5), latency)
        if fn == ".query_str":
            return ScoredCall("value", (), Leaf(rng.choice(WORDS)), latency)
        if fn == ".query_list":
            n = rng.randint(0, 3)
            return ScoredCall("value", (), Leaf([rng.randint(0, 9) for _ in range(n)]), latency)
        raise EnvError(f"unknown external function {fn!r}")

    def call(self, fn: str, arg: Value) -> EnvResult:
        sc = self.scored(fn, arg)
        return EnvResult(concrete_result(sc), sc.latency_ms)


def concrete_result(sc: ScoredCall) -> CallResult:
    """Collapse raw scores to the single answer a plain tool would give."""
    if sc.kind == "value":
        assert sc.value is not None
        return sc.value
    if sc.kind == "classify":
        if not sc.candidates:
            raise EnvError("classifier produced no candidates")
        best_label, best_score = sc.candidates[0]
        for label, score in sc.candidates[1:]:
            if score > best_score:  # first candidate wins ties
                best_label, best_score = label, score
        return Leaf(best_label)
    if sc.kind == "detect":
        return Leaf([tok for tok, score in sc.candidates if score >= MockEnv.DETECT_THRESHOLD])
    raise EnvError(f"unknown scored-call kind {sc.kind!r}")


def mock_env(seed: int) -> MockEnv:
    return MockEnv(seed)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


class FixtureEnv:
    """Environment backed by a JSON fixture.

    Schema: {"inputs": {name: const}, "default_latency_ms": number,
    "responses": [{"fn": str, "arg": [consts...], "result": json-value,
    "latency_ms": number?, "kind": "classify"|"detect"?,
    "candidates": [[label, score], ...]?}, ...]}.

    The fixture "arg" list is matched as the call's argument tuple.
    Multiple responses for one (fn, arg) are consumed in order; the last
    one repeats once exhausted, so re-running a program needs no reload.
    """

    def __init__(self, spec: dict):
        self.inputs: dict[str, Const] = dict(spec.get("inputs", {}))
        self.default_latency_ms = float(spec.get("default_latency_ms", 50.0))
        self._queues: dict[tuple[str, str], deque] = {}
        for resp in spec.get("responses", []):
            arg = py_to_value(tuple(resp["arg"]))
            key = (resp["fn"], value_canonical(arg))
            self._queues.setdefault(key, deque()).append(resp)

    @classmethod
    def load(cls, path: str | Path) -> "FixtureEnv":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def _lookup(self, fn: str, arg: Value) -> dict:
        key = (fn, value_canonical(arg))
        q = self._queues.get(key)
        if not q:
            raise EnvError(f"no fixture response for {fn} {value_canonical(arg)}")
        resp = q.popleft()
        if not q:
            q.append(resp)  # the final response repeats
        return resp

    def scored(self, fn: str, arg: Value) -> ScoredCall:
        resp = self._lookup(fn, arg)
        latency = float(resp.get("latency_ms", self.default_latency_ms))
        kind = resp.get("kind")
        if kind in ("classify", "detect"):
            cands = tuple((c, float(s)) for c, s in resp["candidates"])
            return ScoredCall(kind, cands, None, latency)
        value = py_to_value(_json_to_py(resp["result"]))
        return ScoredCall("value", (), value, latency)

    def call(self, fn: str, arg: Value) -> EnvResult:
        sc = self.scored(fn, arg)
        return EnvResult(concrete_result(sc), sc.latency_ms)


def _json_to_py(obj):
    """Fixture JSON values are consts; a {"tuple": [...]} wrapper builds
    tuples, since JSON has no tuple type."""
    if isinstance(obj, dict):
        if set(obj) == {"tuple"}:
            return tuple(_json_to_py(i) for i in obj["tuple"])
        raise EnvError(f"bad fixture value {obj!r}")
    return obj


# ---------------------------------------------------------------------------
# record / replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExternalCallRecord:
    seq: int
    fn: str
    arg_canonical: str
    result: Value
    latency_ms: float


def value_json(v: Value):
    if isinstance(v, Leaf):
        return {"c": v.c}
    return {"t": [value_json(i) for i in v.items]}


def value_from_json(obj) -> Value:
    if not isinstance(obj, dict):
        raise EnvError(f"bad value encoding {obj!r}")
    if "c" in obj:
        return Leaf(obj["c"])
    if "t" in obj:
        return Tup(tuple(value_from_json(i) for i in obj["t"]))
    raise EnvError(f"bad value encoding {obj!r}")


class RecordingEnv:
    """Wraps an environment, capturing every call in sequence order."""

    def __init__(self, inner: Environment):
        self.inner = inner
        self.records: list[ExternalCallRecord] = []
        self._lock = threading.Lock()

    def call(self, fn: str, arg: Value) -> EnvResult:
        res = self.inner.call(fn, arg)
        if not isinstance(res.result, (Leaf, Tup)):
            raise EnvError("cannot record set-valued results")
        with self._lock:
            self.records.append(ExternalCallRecord(
                len(self.records), fn, value_canonical(arg), res.result, res.latency_ms))
        return res


def save_log(records: list[ExternalCallRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "seq": r.seq,
                "fn": r.fn,
                "arg": r.arg_canonical,
                "result": value_json(r.result),
                "latency_ms": r.latency_ms,
            }, ensure_ascii=False) + "\n")


def load_log(path: str | Path) -> list[ExternalCallRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(ExternalCallRecord(
                    int(obj["seq"]), obj["fn"], obj["arg"],
                    value_from_json(obj["result"]), float(obj["latency_ms"])))
            except (KeyError, ValueError) as exc:
                raise EnvError(f"{path}:{lineno}: bad log record: {exc}") from exc
    return records


class ReplayEnv:
    """Serves calls from a recorded log; per-(fn, argument) FIFO order."""

    def __init__(self, records: list[ExternalCallRecord]):
        self._queues: dict[tuple[str, str], deque[ExternalCallRecord]] = {}
        self._lock = threading.Lock()
        for r in sorted(records, key=lambda r: r.seq):
            self._queues.setdefault((r.fn, r.arg_canonical), deque()).append(r)

    @classmethod
    def load(cls, path: str | Path) -> "ReplayEnv":
        return cls(load_log(path))

    def call(self, fn: str, arg: Value) -> EnvResult:
        key = (fn, value_canonical(arg))
        with self._lock:
            q = self._queues.get(key)
            if not q:
                raise ReplayMiss(f"replay miss: {fn} {value_canonical(arg)}")
            r = q.popleft()
        return EnvResult(r.result, r.latency_ms)


class InstrumentedEnv:
    """Wrapper that counts calls; used to assert effect multisets."""

    def __init__(self, inner: Environment):
        self.inner = inner
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def call(self, fn: str, arg: Value) -> EnvResult:
        with self._lock:
            self.calls.append((fn, value_canonical(arg)))
        return self.inner.call(fn, arg)

    def scored(self, fn: str, arg: Value) -> ScoredCall:
        with self._lock:
            self.calls.append((fn, value_canonical(arg)))
        return self.inner.scored(fn, arg)  # type: ignore[attr-defined]
