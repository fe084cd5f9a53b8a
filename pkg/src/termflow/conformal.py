"""Prediction sets from model scores, and threshold calibration.

Classifiers yield the set of labels whose score clears a per-model
threshold; detectors yield lists whose low-scoring items are marked
possibly-absent.  A single scalar tau rescales every base threshold at
once, and calibration picks the largest tau on a grid whose validation
error stays under the target rate alpha.  A brute-force concretization
oracle backs the soundness tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

from .ir import (
    AbsListResult,
    AbsValue,
    Const,
    Leaf,
    LeafSet,
    Tup,
    TupSet,
    Value,
    value_key,
)
from .rewrite import AbstainError, concretize_abs
from .toolsenv import EnvResult, ScoredCall, ScoredEnvironment


class ConformalError(Exception):
    pass


# default base threshold a wrapper applies to models absent from the config
DEFAULT_BASE_THRESHOLD = 0.5

CONCRETIZE_CAP = 4096


@dataclass(frozen=True)
class ScoredOutput:
    """Raw (label, score) candidates of one model invocation."""

    candidates: tuple[tuple[Const, float], ...]

    def __post_init__(self):
        labels = set()
        for label, score in self.candidates:
            if not math.isfinite(score):
                raise ConformalError(f"score for {label!r} is not finite")
            key = value_key(Leaf(label)) if isinstance(label, list) else label
            if key in labels:
                raise ConformalError(f"duplicate candidate label {label!r}")
            labels.add(key)

    @classmethod
    def from_scored_call(cls, sc: ScoredCall) -> "ScoredOutput":
        return cls(tuple(sc.candidates))


@dataclass(frozen=True)
class ConformalConfig:
    base_thresholds: Mapping[str, float]
    tau_grid: tuple[float, ...]
    chosen_tau: float
    alpha: float
    detection_certain_threshold: float = 0.9

    def __post_init__(self):
        if not self.tau_grid:
            raise ConformalError("tau_grid must be nonempty")
        if list(self.tau_grid) != sorted(self.tau_grid):
            raise ConformalError("tau_grid must be ascending")
        if any(t <= 0 for t in self.tau_grid) or self.chosen_tau <= 0:
            raise ConformalError("tau values must be positive")
        if not (0 < self.alpha < 1):
            raise ConformalError("alpha must lie in (0, 1)")
        for model, theta in self.base_thresholds.items():
            if not (0 < theta <= 1):
                raise ConformalError(f"base threshold for {model!r} outside (0, 1]")

    def with_tau(self, tau: float) -> "ConformalConfig":
        return replace(self, chosen_tau=tau)

    def effective_threshold(self, model: str, default: float | None = None) -> float:
        if model in self.base_thresholds:
            theta = self.base_thresholds[model]
        elif default is not None:
            theta = default
        else:
            raise ConformalError(f"no base threshold for model {model!r}")
        return clamp_threshold(theta * self.chosen_tau)


def clamp_threshold(x: float) -> float:
    return min(x, 1.0)


# ---------------------------------------------------------------------------
# abstract wrappers
# ---------------------------------------------------------------------------


def abstract_classify(out: ScoredOutput, model: str, cfg: ConformalConfig) -> LeafSet:
    """Labels clearing the scaled threshold; argmax singleton when none do."""
    thr = cfg.effective_threshold(model)
    labels = [label for label, score in out.candidates if score >= thr]
    if not labels:
        if not out.candidates:
            raise ConformalError("classifier produced no candidates")
        best_label, best_score = out.candidates[0]
        for label, score in out.candidates[1:]:
            if score > best_score:  # first candidate wins ties
                best_label, best_score = label, score
        labels = [best_label]
    return LeafSet(tuple(labels))


def abstract_detect(out: ScoredOutput, cfg: ConformalConfig,
                    model: str = "find") -> AbsListResult:
    """Detections split into certain / possibly-present tiers, order kept."""
    low = cfg.effective_threshold(model, default=DEFAULT_BASE_THRESHOLD)
    certain_thr = cfg.detection_certain_threshold
    items = []
    for token, score in out.candidates:
        if score >= certain_thr:
            items.append((token, True))
        elif score >= low:
            items.append((token, False))
    return AbsListResult(tuple(items))


# ---------------------------------------------------------------------------
# concretization oracle
# ---------------------------------------------------------------------------


def _abslist_lists(items: Sequence[tuple[Const, bool]], cap: int) -> list[list]:
    uncertain = [i for i, (_, certain) in enumerate(items) if not certain]
    if 2 ** len(uncertain) > cap:
        raise AbstainError(
            f"abstract list with {len(uncertain)} uncertain items exceeds cap {cap}")
    out: list[list] = []
    for mask in range(2 ** len(uncertain)):
        chosen = []
        k = 0
        for c, certain in items:
            if certain:
                chosen.append(c)
            else:
                if mask & (1 << k) == 0:  # bit clear = item present
                    chosen.append(c)
                k += 1
        out.append(chosen)
    seen = set()
    uniq = []
    for lst in out:
        key = value_key(Leaf(lst))
        if key not in seen:
            seen.add(key)
            uniq.append(lst)
    return uniq


def concretize(av, cap: int = CONCRETIZE_CAP):
    """Every concrete value an abstract value denotes.

    Accepts abstract values (returning a list of Values) and abstract
    lists (returning a list of plain lists).  Raises on cap overflow.
    """
    if isinstance(av, (Leaf, Tup)):
        return [av]
    if isinstance(av, (LeafSet, TupSet)):
        return concretize_abs(av, cap)
    if hasattr(av, "items"):  # AbsListResult or the AbsList op
        return _abslist_lists(tuple(av.items), cap)
    raise ConformalError(f"cannot concretize {av!r}")


def certainty(av) -> str:
    """'certain' iff the abstract value denotes exactly one concrete value."""
    return "certain" if len(concretize(av)) == 1 else "uncertain"


def output_contains(output: Union[Value, AbsValue], truth: Value,
                    cap: int = CONCRETIZE_CAP) -> bool:
    """Membership of the ground truth in a run's (possibly set-valued) output."""
    want = value_key(truth)
    try:
        return any(value_key(v) == want for v in concretize(output, cap))
    except AbstainError:
        return False


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationTask:
    """One validation task: a program, its environment, and the expected value."""

    program: object
    ft: object
    env: ScoredEnvironment
    truth: Value
    name: str = ""


def select_tau(tau_grid: Sequence[float], errors: Sequence[float], alpha: float) -> float:
    """Largest grid tau with error < alpha; smallest grid tau when none."""
    chosen = None
    for tau, err in zip(tau_grid, errors):
        if err < alpha:
            chosen = tau if chosen is None else max(chosen, tau)
    return chosen if chosen is not None else min(tau_grid)


def task_miss(task: CalibrationTask, cfg: ConformalConfig) -> bool:
    """Run one task conformally; True when the truth escapes the output set."""
    from .runtime import Result, run  # local import; runtime pulls this module's env wrapper users

    outcome = run(task.program, task.ft, ConformalEnv(task.env, cfg), mode="conformal")
    if not isinstance(outcome, Result):
        return True  # failures count as misses
    return not output_contains(outcome.value, task.truth)


def miss_matrix(tasks: Sequence[CalibrationTask],
                cfg: ConformalConfig) -> list[list[bool]]:
    """miss_matrix[i][j] = task i misses at tau_grid[j]."""
    return [[task_miss(t, cfg.with_tau(tau)) for tau in cfg.tau_grid] for t in tasks]


def errors_from_misses(misses: Sequence[Sequence[bool]]) -> list[float]:
    if not misses:
        raise ConformalError("no calibration tasks")
    n = len(misses)
    width = len(misses[0])
    return [sum(row[j] for row in misses) / n for j in range(width)]


def calibrate_tau(tasks: Sequence[CalibrationTask], cfg: ConformalConfig) -> float:
    """Pick tau on the grid from full conformal runs of the validation tasks."""
    errors = errors_from_misses(miss_matrix(tasks, cfg))
    return select_tau(cfg.tau_grid, errors, cfg.alpha)


def optimize_base_threshold(samples: Sequence[tuple[ScoredOutput, Const]],
                            grid: Sequence[float], alpha: float) -> float:
    """Smallest-mean-set-size threshold keeping coverage >= 1 - alpha.

    Applies the classify rule (threshold + argmax fallback) at tau = 1 for
    each candidate threshold over (scored output, true label) samples.
    """
    if not samples:
        raise ConformalError("no optimization samples")
    best = None  # (mean size, -theta) minimized
    for theta in grid:
        if not (0 < theta <= 1):
            raise ConformalError(f"grid threshold {theta} outside (0, 1]")
        cfg = ConformalConfig({"m": theta}, (1.0,), 1.0, alpha)
        sizes = 0
        covered = 0
        for out, truth in samples:
            pset = abstract_classify(out, "m", cfg)
            sizes += len(pset.choices)
            covered += truth in pset.choices
        coverage = covered / len(samples)
        if coverage >= 1.0 - alpha:
            cand = (sizes / len(samples), -theta)
            if best is None or cand < best:
                best = cand
    if best is None:
        return min(grid)
    return -best[1]


def optimize_base_thresholds(samples_by_model: Mapping[str, Sequence[tuple[ScoredOutput, Const]]],
                             grid: Sequence[float], alpha: float) -> dict[str, float]:
    return {m: optimize_base_threshold(s, grid, alpha)
            for m, s in sorted(samples_by_model.items())}


# ---------------------------------------------------------------------------
# environment wrapper
# ---------------------------------------------------------------------------


def model_name(fn: str) -> str:
    """Config key for an external function: its name without the method dot."""
    return fn[1:] if fn.startswith(".") else fn


class ConformalEnv:
    """Adapter turning a scored environment's outputs into prediction sets."""

    def __init__(self, inner: ScoredEnvironment, cfg: ConformalConfig):
        self.inner = inner
        self.cfg = cfg

    def call(self, fn: str, arg) -> EnvResult:
        sc = self.inner.scored(fn, arg)
        if sc.kind == "value":
            assert sc.value is not None
            return EnvResult(sc.value, sc.latency_ms)
        out = ScoredOutput.from_scored_call(sc)
        model = model_name(fn)
        cfg = self.cfg
        if sc.kind == "classify":
            if model not in cfg.base_thresholds:
                cfg = replace(cfg, base_thresholds={
                    **dict(cfg.base_thresholds), model: DEFAULT_BASE_THRESHOLD})
            return EnvResult(abstract_classify(out, model, cfg), sc.latency_ms)
        if sc.kind == "detect":
            return EnvResult(abstract_detect(out, cfg, model), sc.latency_ms)
        raise ConformalError(f"unknown scored-call kind {sc.kind!r}")


# ---------------------------------------------------------------------------
# calibration dataset I/O
# ---------------------------------------------------------------------------


def load_calibration_tasks(path: str | Path) -> list[CalibrationTask]:
    """Load tasks from a JSONL file of {"source", "fixture", "truth"} records.

    Paths are taken relative to the dataset file.  Each source program is
    transpiled with the fixture's inputs; truth values use plain consts or
    the {"tuple": [...]} wrapper.
    """
    from .toolsenv import FixtureEnv, _json_to_py
    from .transpiler import transpile

    base = Path(path).parent
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                src_path = base / rec["source"]
                env = FixtureEnv.load(base / rec["fixture"])
                truth = _to_value(_json_to_py(rec["truth"]))
            except (KeyError, ValueError, OSError) as exc:
                raise ConformalError(f"{path}:{lineno}: bad task record: {exc}") from exc
            program, ft = transpile(src_path.read_text(encoding="utf-8"),
                                    str(src_path), inputs=env.inputs)
            tasks.append(CalibrationTask(program, ft, env, truth, name=rec["source"]))
    if not tasks:
        raise ConformalError(f"{path}: no tasks")
    return tasks


def _to_value(py) -> Value:
    from .ir import py_to_value

    return py_to_value(py)
