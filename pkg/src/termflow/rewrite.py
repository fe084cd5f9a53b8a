"""Term rewriting over programs.

Rules apply to top-level statements only; nested blocks become top-level
when the control-flow rule that owns them fires.  Every rule is effect
free: external calls are never invoked here, only located
(:func:`find_dispatchable`) and later replaced (:func:`substitute_result`)
by the runtime.

Concrete rules resolve aliases and projections, take decided branches,
unroll folds over known lists, and evaluate pure calls.  Set-valued rules
(active in ``conformal`` mode) additionally split undecided branches, fold
over lists with possibly-absent items, and collapse joins once their
members resolve.

Two drivers share the rule handlers.  :func:`apply` rewrites one instance
eagerly in place (tests use it to explore arbitrary application orders).
:func:`normalize` makes a single left-to-right pass with an explicit work
stack: a statement's redex status depends only on itself and statements
before it, which are final once the scan passes them, so first-match
normalization never needs to look back.  Alias elimination is recorded in
a substitution and materialized once at the end of the pass instead of
renaming the whole program per step.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Callable, Union

from .builtins import BUILTINS, eval_builtin
from .ir import (
    AbsList,
    AbsListResult,
    AbsPrim,
    AbsValue,
    Alias,
    Block,
    Call,
    CallResult,
    Fold,
    Fresh,
    FuncTable,
    If,
    Join,
    Leaf,
    LeafSet,
    MkTuple,
    Op,
    Pending,
    Prim,
    Program,
    Proj,
    Stmt,
    TaskId,
    Tup,
    TupSet,
    Value,
    VarId,
    const_key,
    freshen,
    py_to_value,
    rename_vars,
    stmt,
    value_key,
    value_to_py,
)

DEFAULT_STEP_BUDGET = 10**6

# widest abstract argument a pure call or join will enumerate
PURE_CONCRETIZE_CAP = 64


class RewriteError(Exception):
    """Base class for failures surfaced during rewriting."""


class EvalError(RewriteError):
    """A pure call or substitution failed (bad types, arity, zero division)."""


class DivergenceError(RewriteError):
    """normalize exceeded its step budget without reaching a terminal form."""


class AbstainError(RewriteError):
    """Set-valued execution hit a construct it cannot represent soundly."""


class Rule(enum.Enum):
    # enum definition order is the tie-break order at a given statement
    ALIAS = "alias"
    PROJ = "proj"
    IF_T = "if-t"
    IF_F = "if-f"
    FOLD_UNROLL = "fold"
    JOIN_JOIN = "join-join"
    JOIN_TUPLE = "join-tuple"
    JOIN_PRIM = "join-prim"
    IF_TF = "if-tf"
    FOLD_ABS = "fold-abs"
    PURE_APPLY = "pure-apply"


_CONFORMAL_ONLY = {Rule.JOIN_JOIN, Rule.JOIN_TUPLE, Rule.JOIN_PRIM, Rule.IF_TF, Rule.FOLD_ABS}

_RULE_ORDER = {r: i for i, r in enumerate(Rule)}


@dataclass(frozen=True)
class RuleInstance:
    rule: Rule
    site: tuple[int, ...]  # path of statement indices; top level = (i,)


TraceFn = Callable[[dict], None]


@dataclass
class RewriteContext:
    program: Program
    ft: FuncTable
    mode: str = "concrete"  # "concrete" | "conformal"
    fresh: Fresh = None  # type: ignore[assignment]
    trace: TraceFn | None = None

    def __post_init__(self):
        if self.mode not in ("concrete", "conformal"):
            raise ValueError(f"bad mode {self.mode!r}")
        if self.fresh is None:
            self.fresh = Fresh.for_program(self.program)
        self._subst: dict[VarId, VarId] = {}
        self._bind: dict[VarId, Op] = {}
        self.reindex()

    def reindex(self) -> None:
        """Rebuild the binding index from the current program."""
        self._bind.clear()
        for s in self.program.stmts:
            if len(s.targets) == 1:
                self._bind[s.targets[0]] = s.op

    def resolve(self, x: VarId) -> VarId:
        """Chase pending alias substitutions (path compressed)."""
        subst = self._subst
        if x not in subst:
            return x
        path = [x]
        while path[-1] in subst:
            path.append(subst[path[-1]])
        root = path[-1]
        for v in path[:-1]:
            subst[v] = root
        return root

    def op_of(self, x: VarId) -> Op | None:
        """Op of the single-target top-level statement binding ``x``."""
        return self._bind.get(self.resolve(x))

    def emit(self, event: dict) -> None:
        if self.trace is not None:
            self.trace(event)


def op_root(ctx: RewriteContext, x: VarId) -> tuple[VarId, Op | None]:
    """Follow substitutions and Alias bindings to the defining op."""
    while True:
        x = ctx.resolve(x)
        op = ctx._bind.get(x)
        if isinstance(op, Alias):
            x = op.x
            continue
        return x, op


# ---------------------------------------------------------------------------
# resolution
# ---------------------------------------------------------------------------


def value_of(ctx: RewriteContext, x: VarId) -> Value | None:
    """Concrete value of ``x`` if its binding chain fully resolves."""
    _, op = op_root(ctx, x)
    if isinstance(op, Prim):
        return Leaf(op.c)
    if isinstance(op, MkTuple):
        items = []
        for y in op.xs:
            v = value_of(ctx, y)
            if v is None:
                return None
            items.append(v)
        return Tup(tuple(items))
    return None


def abs_value_of(ctx: RewriteContext, x: VarId,
                 cap: int = PURE_CONCRETIZE_CAP) -> AbsValue | None:
    """Abstract value of ``x`` if resolvable; abstract lists are expanded to
    the set of their concretizations (bounded by ``cap``)."""
    _, op = op_root(ctx, x)
    if isinstance(op, Prim):
        return LeafSet((op.c,))
    if isinstance(op, AbsPrim):
        return LeafSet(op.choices)
    if isinstance(op, AbsList):
        return LeafSet(tuple(_abslist_concretizations(op, cap)))
    if isinstance(op, MkTuple):
        items = []
        for y in op.xs:
            av = abs_value_of(ctx, y, cap)
            if av is None:
                return None
            items.append(av)
        return TupSet(tuple(items))
    return None


def _abslist_concretizations(op: AbsList, cap: int) -> list[list]:
    uncertain = sum(1 for _, certain in op.items if not certain)
    if 2**uncertain > cap:
        raise AbstainError(
            f"abstract list with {uncertain} uncertain items exceeds enumeration cap {cap}")
    out: list[list] = []
    for keep in itertools.product((True, False), repeat=uncertain):
        chosen: list = []
        k = 0
        for c, certain in op.items:
            if certain:
                chosen.append(c)
            else:
                if keep[k]:
                    chosen.append(c)
                k += 1
        out.append(chosen)
    # drop duplicates (identical items may collapse), keep first occurrence
    seen = set()
    uniq = []
    for lst in out:
        key = const_key(lst)
        if key not in seen:
            seen.add(key)
            uniq.append(lst)
    return uniq


def concretize_abs(av: AbsValue, cap: int) -> list[Value]:
    """All concrete values an abstract value stands for, in canonical order."""
    if isinstance(av, LeafSet):
        if len(av.choices) > cap:
            raise AbstainError(f"abstract value has {len(av.choices)} choices, cap {cap}")
        return [Leaf(c) for c in av.choices]
    per_item = [concretize_abs(i, cap) for i in av.items]
    total = 1
    for choices in per_item:
        total *= len(choices)
        if total > cap:
            raise AbstainError(f"abstract value has over {cap} concretizations")
    return [Tup(combo) for combo in itertools.product(*per_item)]


def abs_union(values: list[Value]) -> AbsValue:
    """Smallest representable abstract value covering all of ``values``."""
    if all(isinstance(v, Leaf) for v in values):
        return LeafSet(tuple(v.c for v in values))  # type: ignore[union-attr]
    if all(isinstance(v, Tup) for v in values):
        lengths = {len(v.items) for v in values}  # type: ignore[union-attr]
        if len(lengths) == 1:
            n = lengths.pop()
            return TupSet(tuple(
                abs_union([v.items[i] for v in values]) for i in range(n)))  # type: ignore[union-attr]
    raise AbstainError("cannot represent a union of values with different shapes")


# ---------------------------------------------------------------------------
# realizing values as statements
# ---------------------------------------------------------------------------


def _realize_value(v: Value, fresh: Fresh, out: list[Stmt]) -> VarId:
    if isinstance(v, Leaf):
        x = fresh.var()
        out.append(stmt(x, Prim(v.c)))
        return x
    parts = tuple(_realize_value(i, fresh, out) for i in v.items)
    x = fresh.var()
    out.append(stmt(x, MkTuple(parts)))
    return x


def _realize_abs(av: AbsValue, fresh: Fresh, out: list[Stmt]) -> VarId:
    if isinstance(av, LeafSet):
        x = fresh.var()
        if len(av.choices) == 1:
            out.append(stmt(x, Prim(av.choices[0])))
        else:
            out.append(stmt(x, AbsPrim(av.choices)))
        return x
    parts = tuple(_realize_abs(i, fresh, out) for i in av.items)
    x = fresh.var()
    out.append(stmt(x, MkTuple(parts)))
    return x


def realize_result_into(targets: tuple[VarId, ...], result: CallResult,
                        fresh: Fresh, mode: str) -> list[Stmt]:
    """Statements binding ``targets`` to a call result.

    Set-valued results are only representable in conformal mode; singleton
    sets and all-certain lists canonicalize to their concrete forms first.
    """
    result = canonicalize_result(result)
    if isinstance(result, (Leaf, Tup)):
        return _bind_targets_value(targets, result, fresh)
    if mode != "conformal":
        raise EvalError("set-valued result in concrete mode")
    if isinstance(result, AbsListResult):
        if len(targets) != 1:
            raise EvalError("cannot destructure an abstract list")
        return [stmt(targets[0], AbsList(result.items))]
    return _bind_targets_abs(targets, result, fresh)


def canonicalize_result(result: CallResult) -> CallResult:
    """Collapse degenerate abstract results into concrete values."""
    if isinstance(result, LeafSet):
        if len(result.choices) == 1:
            return Leaf(result.choices[0])
        return result
    if isinstance(result, TupSet):
        items = tuple(canonicalize_result(i) for i in result.items)
        if all(isinstance(i, (Leaf, Tup)) for i in items):
            return Tup(items)  # type: ignore[arg-type]
        return TupSet(tuple(
            i if isinstance(i, (LeafSet, TupSet)) else _value_to_abs(i) for i in items))
    if isinstance(result, AbsListResult):
        if all(certain for _, certain in result.items):
            return Leaf([c for c, _ in result.items])
        return result
    return result


def _value_to_abs(v: Value) -> AbsValue:
    if isinstance(v, Leaf):
        return LeafSet((v.c,))
    return TupSet(tuple(_value_to_abs(i) for i in v.items))


def _bind_targets_value(targets: tuple[VarId, ...], v: Value, fresh: Fresh) -> list[Stmt]:
    if len(targets) == 1:
        out: list[Stmt] = []
        if isinstance(v, Leaf):
            out.append(stmt(targets[0], Prim(v.c)))
        else:
            parts = tuple(_realize_value(i, fresh, out) for i in v.items)
            out.append(stmt(targets[0], MkTuple(parts)))
        return out
    if not isinstance(v, Tup) or len(v.items) != len(targets):
        raise EvalError(f"cannot destructure {v!r} into {len(targets)} targets")
    out = []
    for t, item in zip(targets, v.items):
        out.extend(_bind_targets_value((t,), item, fresh))
    return out


def _bind_targets_abs(targets: tuple[VarId, ...], av: AbsValue, fresh: Fresh) -> list[Stmt]:
    if len(targets) == 1:
        out: list[Stmt] = []
        if isinstance(av, LeafSet):
            if len(av.choices) == 1:
                out.append(stmt(targets[0], Prim(av.choices[0])))
            else:
                out.append(stmt(targets[0], AbsPrim(av.choices)))
        else:
            parts = tuple(_realize_abs(i, fresh, out) for i in av.items)
            out.append(stmt(targets[0], MkTuple(parts)))
        return out
    if not isinstance(av, TupSet) or len(av.items) != len(targets):
        raise EvalError(f"cannot destructure abstract value into {len(targets)} targets")
    out = []
    for t, item in zip(targets, av.items):
        out.extend(_bind_targets_abs((t,), item, fresh))
    return out


def _bind_targets_var(targets: tuple[VarId, ...], src: VarId) -> list[Stmt]:
    """Bind targets to the value already held by ``src``."""
    if len(targets) == 1:
        return [stmt(targets[0], Alias(src))]
    return [stmt(t, Proj(j, src)) for j, t in enumerate(targets)]


# ---------------------------------------------------------------------------
# rule matching
# ---------------------------------------------------------------------------


def applicable(ctx: RewriteContext) -> list[RuleInstance]:
    """Every rule instance that currently matches, in deterministic order:
    statement index ascending, then rule declaration order."""
    out: list[RuleInstance] = []
    for i, s in enumerate(ctx.program.stmts):
        for rule in _stmt_rules(ctx, s):
            out.append(RuleInstance(rule, (i,)))
    return out


def _stmt_rules(ctx: RewriteContext, s: Stmt) -> list[Rule]:
    conformal = ctx.mode == "conformal"
    op = s.op
    rules: list[Rule] = []
    if isinstance(op, Alias) and len(s.targets) == 1:
        rules.append(Rule.ALIAS)
    elif isinstance(op, Proj):
        _, b = op_root(ctx, op.x)
        if isinstance(b, MkTuple) and 0 <= op.i < len(b.xs):
            rules.append(Rule.PROJ)
    elif isinstance(op, If):
        cond = _cond_choices(ctx, op.cond)
        if cond == {True}:
            rules.append(Rule.IF_T)
        elif cond == {False}:
            rules.append(Rule.IF_F)
        elif conformal and cond == {True, False}:
            rules.append(Rule.IF_TF)
    elif isinstance(op, Fold):
        _, b = op_root(ctx, op.subject)
        if isinstance(b, Prim) and isinstance(b.c, list):
            rules.append(Rule.FOLD_UNROLL)
        elif isinstance(b, MkTuple):
            rules.append(Rule.FOLD_UNROLL)
        elif conformal and isinstance(b, (AbsList, AbsPrim)):
            rules.append(Rule.FOLD_ABS)
    elif isinstance(op, Join) and conformal:
        roots = [op_root(ctx, x) for x in op.xs]
        if any(isinstance(b, Join) for _, b in roots) \
                or len({r for r, _ in roots}) < len(op.xs):
            rules.append(Rule.JOIN_JOIN)
        elif all(isinstance(b, (MkTuple, Prim, AbsPrim, AbsList)) for _, b in roots):
            if any(isinstance(b, MkTuple) for _, b in roots):
                rules.append(Rule.JOIN_TUPLE)
            else:
                rules.append(Rule.JOIN_PRIM)
    elif isinstance(op, Call):
        decl = ctx.ft.get(op.func)
        if decl.pure:
            if value_of(ctx, op.arg) is not None:
                rules.append(Rule.PURE_APPLY)
            elif conformal and _abs_resolvable(ctx, op.arg):
                rules.append(Rule.PURE_APPLY)
    return rules


def _cond_choices(ctx: RewriteContext, x: VarId) -> set | None:
    """Set of constants a condition variable may hold, if resolvable."""
    _, op = op_root(ctx, x)
    if isinstance(op, Prim):
        return {op.c} if isinstance(op.c, bool) else None
    if isinstance(op, AbsPrim):
        if all(isinstance(c, bool) for c in op.choices):
            return set(op.choices)
    return None


def _abs_resolvable(ctx: RewriteContext, x: VarId) -> bool:
    """Is x's binding chain made only of resolved (possibly abstract) ops?"""
    _, op = op_root(ctx, x)
    if isinstance(op, (Prim, AbsPrim, AbsList)):
        return True
    if isinstance(op, MkTuple):
        return all(_abs_resolvable(ctx, y) for y in op.xs)
    return False


# ---------------------------------------------------------------------------
# rule application
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _AliasElim:
    """A fired alias rule: drop the statement, substitute target -> source."""

    target: VarId
    source: VarId


def _apply_alias(ctx: RewriteContext, s: Stmt):
    assert isinstance(s.op, Alias)
    return _AliasElim(s.targets[0], ctx.resolve(s.op.x))


def _apply_proj(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, Proj)
    _, b = op_root(ctx, s.op.x)
    assert isinstance(b, MkTuple)
    return _bind_targets_var(s.targets, ctx.resolve(b.xs[s.op.i]))


def _inline_block(ctx: RewriteContext, blk: Block, param_stmts_for) -> tuple[list[Stmt], VarId]:
    """Freshen a block and return (its statements prefixed with the param
    binding, the freshened return variable)."""
    fb = freshen(blk, ctx.fresh)
    out = param_stmts_for(fb.param)
    out.extend(fb.body.stmts)
    return out, fb.body.ret


def _apply_if_taken(ctx: RewriteContext, s: Stmt, branch: Block) -> list[Stmt]:
    out, ret = _inline_block(ctx, branch, lambda p: [stmt(p, MkTuple(()))])
    out.extend(_bind_targets_var(s.targets, ctx.resolve(ret)))
    return out


def _apply_if_t(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, If)
    return _apply_if_taken(ctx, s, s.op.then_blk)


def _apply_if_f(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, If)
    return _apply_if_taken(ctx, s, s.op.else_blk)


def _apply_if_tf(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, If)
    out: list[Stmt] = []
    rets: list[VarId] = []
    for branch in (s.op.then_blk, s.op.else_blk):
        stmts_b, ret = _inline_block(ctx, branch, lambda p: [stmt(p, MkTuple(()))])
        out.extend(stmts_b)
        rets.append(ctx.resolve(ret))
    r0, _ = op_root(ctx, rets[0])
    r1, _ = op_root(ctx, rets[1])
    if r0 == r1:  # both branches return the same value; no join needed
        out.extend(_bind_targets_var(s.targets, rets[0]))
    else:
        out.append(Stmt(s.targets, Join((rets[0], rets[1]))))
    return out


def _fold_items(ctx: RewriteContext, subject_op) -> list[tuple[str, object]]:
    """Items of a concrete fold subject as ('const', c) or ('var', x)."""
    if isinstance(subject_op, Prim):
        return [("const", c) for c in subject_op.c]
    assert isinstance(subject_op, MkTuple)
    return [("var", ctx.resolve(x)) for x in subject_op.xs]


def _param_pair(param: VarId, prev: VarId, item: VarId) -> list[Stmt]:
    return [stmt(param, MkTuple((prev, item)))]


def _apply_fold_unroll(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, Fold)
    _, b = op_root(ctx, s.op.subject)
    out: list[Stmt] = []
    acc = ctx.resolve(s.op.init)
    for kind, item in _fold_items(ctx, b):
        if kind == "const":
            w = ctx.fresh.var()
            out.append(stmt(w, Prim(item)))
        else:
            w = item  # already a variable in scope
        prev = acc
        stmts_b, ret = _inline_block(
            ctx, s.op.body, lambda p: _param_pair(p, prev, w))
        out.extend(stmts_b)
        acc = ctx.resolve(ret)
    out.extend(_bind_targets_var(s.targets, acc))
    return out


def _apply_fold_abs(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, Fold)
    _, b = op_root(ctx, s.op.subject)
    if isinstance(b, AbsPrim):
        raise AbstainError("cannot fold over a set-valued list")
    assert isinstance(b, AbsList)
    out: list[Stmt] = []
    acc = ctx.resolve(s.op.init)
    for c, certain in b.items:
        w = ctx.fresh.var()
        out.append(stmt(w, Prim(c)))
        prev = acc
        stmts_b, ret = _inline_block(ctx, s.op.body, lambda p: _param_pair(p, prev, w))
        out.extend(stmts_b)
        ret = ctx.resolve(ret)
        if certain or ret == prev:
            acc = ret
        else:
            j = ctx.fresh.var()
            out.append(stmt(j, Join((ret, prev))))
            acc = j
    out.extend(_bind_targets_var(s.targets, acc))
    return out


def _apply_join_join(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, Join)
    members: list[VarId] = []
    for x in s.op.xs:
        root, b = op_root(ctx, x)
        if isinstance(b, Join):
            members.extend(ctx.resolve(y) for y in b.xs)
        else:
            members.append(root)
    distinct = sorted(set(members))
    if len(distinct) == 1:
        return _bind_targets_var(s.targets, distinct[0])
    return [Stmt(s.targets, Join(tuple(distinct)))]


def _apply_join_tuple(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, Join)
    ops = [op_root(ctx, x)[1] for x in s.op.xs]
    if not all(isinstance(op, MkTuple) for op in ops):
        raise AbstainError("join of a tuple with a non-tuple value")
    lengths = {len(op.xs) for op in ops}  # type: ignore[union-attr]
    if len(lengths) != 1:
        raise AbstainError("join of tuples with different lengths")
    n = lengths.pop()
    out: list[Stmt] = []
    comps: list[VarId] = []
    for j in range(n):
        srcs = sorted({op_root(ctx, op.xs[j])[0] for op in ops})  # type: ignore[union-attr]
        c = ctx.fresh.var()
        if len(srcs) == 1:
            out.append(stmt(c, Alias(srcs[0])))
        else:
            out.append(stmt(c, Join(tuple(srcs))))
        comps.append(c)
    if len(s.targets) == n and n > 1:
        # destructuring target: bind components directly
        renames = dict(zip(comps, s.targets))
        return [Stmt(tuple(renames.get(t, t) for t in st.targets), st.op) for st in out]
    if len(s.targets) != 1:
        raise EvalError(f"cannot destructure a {n}-tuple join into {len(s.targets)} targets")
    out.append(stmt(s.targets[0], MkTuple(tuple(comps))))
    return out


def _apply_join_prim(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, Join)
    choices: list = []
    for x in s.op.xs:
        av = abs_value_of(ctx, x)
        assert isinstance(av, LeafSet)
        choices.extend(av.choices)
    if len(s.targets) != 1:
        raise EvalError("cannot destructure a set of constants")
    return _bind_targets_abs(s.targets, LeafSet(tuple(choices)), ctx.fresh)


def _apply_pure(ctx: RewriteContext, s: Stmt) -> list[Stmt]:
    assert isinstance(s.op, Call)
    decl = ctx.ft.get(s.op.func)
    name = decl.name
    if name not in BUILTINS:
        raise EvalError(f"pure function {name!r} has no implementation")
    v = value_of(ctx, s.op.arg)
    if v is not None:
        result = py_to_value(_call_builtin(name, v))
        return _bind_targets_value(s.targets, result, ctx.fresh)
    av = abs_value_of(ctx, s.op.arg)
    assert av is not None
    results = [py_to_value(_call_builtin(name, cv))
               for cv in concretize_abs(av, PURE_CONCRETIZE_CAP)]
    uniq: dict[tuple, Value] = {}
    for r in results:
        uniq.setdefault(value_key(r), r)
    vals = list(uniq.values())
    if len(vals) == 1:
        return _bind_targets_value(s.targets, vals[0], ctx.fresh)
    return _bind_targets_abs(s.targets, abs_union(vals), ctx.fresh)


def _call_builtin(name: str, arg: Value):
    py = value_to_py(arg)
    args = py if isinstance(py, tuple) else (py,)
    try:
        return eval_builtin(name, args)
    except RewriteError:
        raise
    except Exception as exc:
        raise EvalError(f"{name}: {exc}") from exc


_HANDLERS = {
    Rule.ALIAS: _apply_alias,
    Rule.PROJ: _apply_proj,
    Rule.IF_T: _apply_if_t,
    Rule.IF_F: _apply_if_f,
    Rule.FOLD_UNROLL: _apply_fold_unroll,
    Rule.JOIN_JOIN: _apply_join_join,
    Rule.JOIN_TUPLE: _apply_join_tuple,
    Rule.JOIN_PRIM: _apply_join_prim,
    Rule.IF_TF: _apply_if_tf,
    Rule.FOLD_ABS: _apply_fold_abs,
    Rule.PURE_APPLY: _apply_pure,
}


def _splice(ctx: RewriteContext, idx: int, new_stmts: list[Stmt]) -> None:
    p = ctx.program
    old = p.stmts[idx]
    if len(old.targets) == 1:
        ctx._bind.pop(old.targets[0], None)
    for ns in new_stmts:
        if len(ns.targets) == 1:
            ctx._bind[ns.targets[0]] = ns.op
    ctx.program = Program(p.stmts[:idx] + tuple(new_stmts) + p.stmts[idx + 1:], p.ret)


def apply(ctx: RewriteContext, ri: RuleInstance) -> None:
    """Apply one rule instance eagerly, in place.  Raises ``RewriteError``
    subclasses on type errors, unrepresentable unions, or enumeration
    blowups."""
    if len(ri.site) != 1:
        raise RewriteError(f"rules apply to top-level statements, got site {ri.site}")
    idx = ri.site[0]
    p = ctx.program
    if not (0 <= idx < len(p.stmts)):
        raise RewriteError(f"no statement at site {ri.site}")
    s = p.stmts[idx]
    if ri.rule not in _stmt_rules(ctx, s):
        raise RewriteError(f"rule {ri.rule.value} does not match statement at {ri.site}")
    result = _HANDLERS[ri.rule](ctx, s)
    if isinstance(result, _AliasElim):
        trimmed = Program(p.stmts[:idx] + p.stmts[idx + 1:], p.ret)
        ctx.program = rename_vars(trimmed, {result.target: result.source})
        ctx.reindex()
    else:
        _splice(ctx, idx, result)
    ctx.emit({"event": "rule", "rule": ri.rule.value, "site": list(ri.site)})


def normalize(ctx: RewriteContext, step_budget: int = DEFAULT_STEP_BUDGET) -> None:
    """Apply rules (first applicable, deterministically) until none match.

    Single left-to-right pass: replacement statements are pushed back onto
    the work stack so each is visited in program order, and statements the
    scan has passed are final.  Equivalent to repeatedly applying the first
    applicable instance, without the quadratic rescans.
    """
    steps = 0
    done: list[Stmt] = []
    stack: list[Stmt] = list(reversed(ctx.program.stmts))
    bind = ctx._bind
    while stack:
        s = stack.pop()
        rules = _stmt_rules(ctx, s)
        if not rules:
            done.append(s)
            if len(s.targets) == 1:
                bind[s.targets[0]] = s.op
            continue
        if steps >= step_budget:
            raise DivergenceError(f"no terminal form within {step_budget} rewrite steps")
        steps += 1
        rule = min(rules, key=_RULE_ORDER.__getitem__)
        result = _HANDLERS[rule](ctx, s)
        if isinstance(result, _AliasElim):
            ctx._subst[result.target] = result.source
        else:
            stack.extend(reversed(result))
        ctx.emit({"event": "rule", "rule": rule.value, "site": [len(done)]})
    if ctx._subst:
        mapping = {y: ctx.resolve(y) for y in list(ctx._subst)}
        ctx.program = rename_vars(Program(tuple(done), ctx.program.ret), mapping)
        ctx._subst.clear()
    else:
        ctx.program = Program(tuple(done), ctx.program.ret)
    ctx.reindex()


# ---------------------------------------------------------------------------
# runtime hooks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dispatchable:
    site: tuple[int, ...]
    func: int
    arg: Value


def find_dispatchable(ctx: RewriteContext,
                      already: frozenset[tuple[int, ...]] = frozenset()) -> list[Dispatchable]:
    """External calls whose argument is fully concrete, in program order."""
    out = []
    for i, s in enumerate(ctx.program.stmts):
        site = (i,)
        if site in already or not isinstance(s.op, Call):
            continue
        if ctx.ft.get(s.op.func).pure:
            continue
        v = value_of(ctx, s.op.arg)
        if v is not None:
            out.append(Dispatchable(site, s.op.func, v))
    return out


def mark_pending(ctx: RewriteContext, site: tuple[int, ...], task: TaskId) -> None:
    """Replace a dispatched call with a pending marker for ``task``."""
    idx = site[0]
    s = ctx.program.stmts[idx]
    if not isinstance(s.op, Call):
        raise RewriteError(f"statement at {site} is not a call")
    _splice(ctx, idx, [Stmt(s.targets, Pending(task))])


def pending_site(ctx: RewriteContext, task: TaskId) -> tuple[int, ...] | None:
    for i, s in enumerate(ctx.program.stmts):
        if isinstance(s.op, Pending) and s.op.task == task:
            return (i,)
    return None


def substitute_result(ctx: RewriteContext, site: tuple[int, ...], result: CallResult) -> None:
    """Replace the pending call at ``site`` with its delivered result."""
    idx = site[0]
    if not (0 <= idx < len(ctx.program.stmts)):
        raise RewriteError(f"no statement at site {site}")
    s = ctx.program.stmts[idx]
    if not isinstance(s.op, (Pending, Call)):
        raise RewriteError(f"statement at {site} is not awaiting a result")
    _splice(ctx, idx, realize_result_into(s.targets, result, ctx.fresh, ctx.mode))


def terminal_value(ctx: RewriteContext) -> Union[Value, AbsValue, None]:
    """The program's result if its return variable has resolved."""
    v = value_of(ctx, ctx.program.ret)
    if v is not None:
        return v
    if ctx.mode == "conformal":
        av = abs_value_of(ctx, ctx.program.ret, cap=4096)
        if av is not None:
            try:
                concs = concretize_abs(av, cap=4096)
            except AbstainError:
                return av
            if len(concs) == 1:
                return concs[0]
            return av
    return None


def has_abstract_ops(p: Program) -> bool:
    return any(isinstance(s.op, (AbsPrim, AbsList, Join)) for s in p.stmts)


def remaining_calls(p: Program) -> list[tuple[int, int]]:
    """(site index, func id) for every call still in the program."""
    return [(i, s.op.func) for i, s in enumerate(p.stmts) if isinstance(s.op, Call)]
