"""Core program representation for rewrite-driven agent programs.

A program is an ordered list of single-assignment statements followed by a
return variable.  Statements bind one variable (or destructure into several),
and their operations either construct values (``PRIM``, ``TUPLE``), shuffle
them around (``ALIAS``, ``PROJ``), invoke functions (``CALL``), or defer
control flow to nested blocks (``FOLD``, ``IF``).  Set-valued execution adds
abstract primitives (``ABSPRIM``), abstract lists whose elements carry a
certainty flag (``ABSLIST``), and deferred unions (``JOIN``).

Invariants enforced by :func:`validate`:

- every variable is bound exactly once across the whole program, including
  all nested blocks and block parameters;
- every variable an operation reads is bound earlier in its enclosing scope
  chain;
- the return variable of each (sub)program is in scope.

Everything here is immutable after construction.  Rewriting produces new
programs; it never mutates existing ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Union

VarId = int
FuncId = int
TaskId = int

# Constants are plain host values: bool, int, float, str, None, or lists of
# constants.  Tuples are deliberately *not* constants; they are built
# structurally with TUPLE statements and live in Value.Tup.
Const = Union[bool, int, float, str, None, list]

PURITY_NAMES = ("pure", "effectful", "preapproved")


class IrError(Exception):
    """Structural misuse of the IR detected outside validation."""


class ParseError(Exception):
    """Raised by :func:`deserialize` on malformed input."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

_TYPE_RANK = {type(None): 0, bool: 1, int: 2, float: 3, str: 4, list: 5}


def is_const(c: object) -> bool:
    if isinstance(c, (bool, int, float, str)) or c is None:
        return True
    if isinstance(c, list):
        return all(is_const(v) for v in c)
    return False


def const_key(c: Const) -> tuple:
    """Total order on constants, distinguishing types Python ``==`` conflates
    (True vs 1, 1 vs 1.0).  Used wherever constant sets need a canonical
    order or identity."""
    if isinstance(c, list):
        return (5, tuple(const_key(v) for v in c))
    rank = _TYPE_RANK[type(c)]
    return (rank, 0 if c is None else c)


def const_to_text(c: Const) -> str:
    return json.dumps(c, ensure_ascii=False)


# ---------------------------------------------------------------------------
# function table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FuncDecl:
    """One callable function: a pure built-in or an effectful external tool.

    Only effectful functions are dispatched to an environment and surfaced
    for approval; pure functions are evaluated in place by the rewrite
    engine.  ``pre_approved`` marks effectful functions whitelisted ahead of
    time: they dispatch without appearing in an approval batch.
    """

    func_id: FuncId
    name: str
    pure: bool
    arity: int | None  # expected argument-tuple length, None = variadic
    pre_approved: bool = False

    @property
    def purity_text(self) -> str:
        if self.pure:
            return "pure"
        return "preapproved" if self.pre_approved else "effectful"


class FuncTable:
    """Mutable registry of function declarations, keyed by id and by name.

    Mutated only while a program is being built (lowering auto-registers
    unknown tool names); execution treats it as read-only.
    """

    def __init__(self, decls: list[FuncDecl] | None = None):
        self._by_id: dict[FuncId, FuncDecl] = {}
        self._by_name: dict[str, FuncDecl] = {}
        self._next_id = 1
        for d in decls or []:
            self.add(d)

    def add(self, decl: FuncDecl) -> FuncDecl:
        if decl.func_id in self._by_id:
            raise IrError(f"duplicate function id {decl.func_id}")
        if decl.name in self._by_name:
            raise IrError(f"duplicate function name {decl.name!r}")
        if any(ch.isspace() for ch in decl.name) or not decl.name:
            raise IrError(f"function name {decl.name!r} must be nonempty and whitespace-free")
        self._by_id[decl.func_id] = decl
        self._by_name[decl.name] = decl
        self._next_id = max(self._next_id, decl.func_id + 1)
        return decl

    def register(self, name: str, pure: bool, arity: int | None,
                 pre_approved: bool = False) -> FuncDecl:
        """Return the existing declaration for ``name`` or create one."""
        if name in self._by_name:
            return self._by_name[name]
        decl = FuncDecl(self._next_id, name, pure, arity, pre_approved)
        return self.add(decl)

    def get(self, func_id: FuncId) -> FuncDecl:
        try:
            return self._by_id[func_id]
        except KeyError:
            raise IrError(f"unknown function id {func_id}") from None

    def by_name(self, name: str) -> FuncDecl | None:
        return self._by_name.get(name)

    def __contains__(self, func_id: FuncId) -> bool:
        return func_id in self._by_id

    def decls(self) -> list[FuncDecl]:
        return [self._by_id[i] for i in sorted(self._by_id)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FuncTable):
            return NotImplemented
        return self.decls() == other.decls()

    def __repr__(self) -> str:
        return f"FuncTable({self.decls()!r})"


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prim:
    c: Const


@dataclass(frozen=True)
class Alias:
    x: VarId


@dataclass(frozen=True)
class MkTuple:
    xs: tuple[VarId, ...]


@dataclass(frozen=True)
class Call:
    func: FuncId
    arg: VarId


@dataclass(frozen=True)
class Proj:
    i: int
    x: VarId


@dataclass(frozen=True)
class Fold:
    """Fold ``body`` over the list bound to ``subject`` starting from
    ``init``.  The block parameter receives the pair
    (previous accumulator, current item) at expansion time."""

    subject: VarId
    init: VarId
    body: "Block"


@dataclass(frozen=True)
class If:
    cond: VarId
    then_blk: "Block"
    else_blk: "Block"


@dataclass(frozen=True)
class Pending:
    """Placeholder for an external call already handed to the executor."""

    task: TaskId


@dataclass(frozen=True)
class AbsPrim:
    """One of a nonempty set of constants.  Stored deduplicated in canonical
    order so structurally equal sets compare and serialize identically."""

    choices: tuple[Const, ...]

    def __post_init__(self):
        canon = _canonical_consts(self.choices)
        if not canon:
            raise IrError("ABSPRIM requires at least one choice")
        object.__setattr__(self, "choices", canon)


@dataclass(frozen=True)
class AbsList:
    """A list whose elements may individually be absent: ``certain=True``
    items are definitely present, others may or may not be.  Order is
    significant and preserved through concretization."""

    items: tuple[tuple[Const, bool], ...]


@dataclass(frozen=True)
class Join:
    """Deferred union of alternative results, collapsed by the set-valued
    rules once every referenced variable resolves."""

    xs: tuple[VarId, ...]

    def __post_init__(self):
        canon = tuple(sorted(set(self.xs)))
        if len(canon) < 2:
            raise IrError("JOIN requires at least two distinct variables")
        object.__setattr__(self, "xs", canon)


Op = Union[Prim, Alias, MkTuple, Call, Proj, Fold, If, Pending, AbsPrim, AbsList, Join]


def _canonical_consts(cs) -> tuple[Const, ...]:
    seen = {}
    for c in cs:
        if not is_const(c):
            raise IrError(f"not a constant: {c!r}")
        seen.setdefault(const_key(c), c)
    return tuple(seen[k] for k in sorted(seen))


# ---------------------------------------------------------------------------
# statements, blocks, programs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stmt:
    """``targets <- op``.  A single target binds the operation's result
    directly; two or more targets destructure a tuple-valued result by
    position."""

    targets: tuple[VarId, ...]
    op: Op

    def __post_init__(self):
        if not self.targets:
            raise IrError("statement must bind at least one variable")
        if len(set(self.targets)) != len(self.targets):
            raise IrError(f"repeated target in {self.targets}")


def stmt(target: VarId, op: Op) -> Stmt:
    return Stmt((target,), op)


@dataclass(frozen=True)
class Block:
    param: VarId
    body: "Program"


@dataclass(frozen=True)
class Program:
    stmts: tuple[Stmt, ...]
    ret: VarId


# ---------------------------------------------------------------------------
# values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    c: Const


@dataclass(frozen=True)
class Tup:
    items: tuple["Value", ...]


Value = Union[Leaf, Tup]


@dataclass(frozen=True)
class LeafSet:
    """Nonempty set of constants a leaf position may take."""

    choices: tuple[Const, ...]

    def __post_init__(self):
        canon = _canonical_consts(self.choices)
        if not canon:
            raise IrError("LeafSet requires at least one choice")
        object.__setattr__(self, "choices", canon)


@dataclass(frozen=True)
class TupSet:
    items: tuple["AbsValue", ...]


AbsValue = Union[LeafSet, TupSet]


@dataclass(frozen=True)
class AbsListResult:
    """Detector-style result: an ordered list of constants, each flagged
    certainly or possibly present.  Lowered into an ABSLIST statement when
    substituted into a program."""

    items: tuple[tuple[Const, bool], ...]


CallResult = Union[Leaf, Tup, LeafSet, TupSet, AbsListResult]


def value_to_py(v: Value):
    if isinstance(v, Leaf):
        return v.c
    return tuple(value_to_py(item) for item in v.items)


def py_to_value(obj) -> Value:
    if isinstance(obj, tuple):
        return Tup(tuple(py_to_value(o) for o in obj))
    if not is_const(obj):
        raise IrError(f"cannot represent {obj!r} as a value")
    return Leaf(obj)


def value_key(v: Value) -> tuple:
    if isinstance(v, Leaf):
        return ("c", const_key(v.c))
    return ("t", tuple(value_key(i) for i in v.items))


def value_canonical(v: Value) -> str:
    """Deterministic text form of a value, used to key replay logs and to
    render approval previews."""
    if isinstance(v, Leaf):
        return const_to_text(v.c)
    return "(" + ", ".join(value_canonical(i) for i in v.items) + ")"


def abs_canonical(av: AbsValue) -> str:
    """Deterministic text form of an abstract value: sets in braces."""
    if isinstance(av, LeafSet):
        return "{" + ", ".join(const_to_text(c) for c in av.choices) + "}"
    return "(" + ", ".join(abs_canonical(i) for i in av.items) + ")"


# ---------------------------------------------------------------------------
# traversal helpers
# ---------------------------------------------------------------------------


def op_inputs(op: Op) -> tuple[VarId, ...]:
    """Variables the op reads at its own level (block bodies excluded)."""
    if isinstance(op, Prim) or isinstance(op, Pending):
        return ()
    if isinstance(op, Alias):
        return (op.x,)
    if isinstance(op, MkTuple):
        return op.xs
    if isinstance(op, Call):
        return (op.arg,)
    if isinstance(op, Proj):
        return (op.x,)
    if isinstance(op, Fold):
        return (op.subject, op.init)
    if isinstance(op, If):
        return (op.cond,)
    if isinstance(op, (AbsPrim, AbsList)):
        return ()
    if isinstance(op, Join):
        return op.xs
    raise IrError(f"unknown op {op!r}")


def op_blocks(op: Op) -> tuple[Block, ...]:
    if isinstance(op, Fold):
        return (op.body,)
    if isinstance(op, If):
        return (op.then_blk, op.else_blk)
    return ()


def iter_stmts(p: Program) -> Iterator[Stmt]:
    """All statements, depth first, including nested blocks."""
    for s in p.stmts:
        yield s
        for b in op_blocks(s.op):
            yield from iter_stmts(b.body)


def bound_vars(p: Program) -> list[VarId]:
    """Every variable bound in the program, targets and block params alike,
    in traversal order (duplicates preserved for the validator)."""
    out: list[VarId] = []

    def walk(prog: Program) -> None:
        for s in prog.stmts:
            out.extend(s.targets)
            for b in op_blocks(s.op):
                out.append(b.param)
                walk(b.body)

    walk(p)
    return out


def free_vars(p: Program) -> set[VarId]:
    """Variables read but not bound anywhere inside ``p``."""
    free: set[VarId] = set()

    def walk(prog: Program, scope: set[VarId]) -> None:
        local = set(scope)
        for s in prog.stmts:
            for x in op_inputs(s.op):
                if x not in local:
                    free.add(x)
            for b in op_blocks(s.op):
                walk(b.body, local | {b.param})
            local.update(s.targets)
        if prog.ret not in local:
            free.add(prog.ret)

    walk(p, set())
    return free


def max_var_id(p: Program) -> int:
    ids = [-1]
    ids.extend(bound_vars(p))

    def refs(prog: Program) -> None:
        for s in iter_stmts(prog):
            ids.extend(op_inputs(s.op))
        ids.append(prog.ret)

    refs(p)
    return max(ids)


def rename_vars(p: Program, mapping: dict[VarId, VarId]) -> Program:
    """Rename every occurrence (bindings and reads) per ``mapping``."""

    def rn(x: VarId) -> VarId:
        return mapping.get(x, x)

    def walk_op(op: Op) -> Op:
        if isinstance(op, Alias):
            return Alias(rn(op.x))
        if isinstance(op, MkTuple):
            return MkTuple(tuple(rn(x) for x in op.xs))
        if isinstance(op, Call):
            return Call(op.func, rn(op.arg))
        if isinstance(op, Proj):
            return Proj(op.i, rn(op.x))
        if isinstance(op, Fold):
            return Fold(rn(op.subject), rn(op.init), walk_block(op.body))
        if isinstance(op, If):
            return If(rn(op.cond), walk_block(op.then_blk), walk_block(op.else_blk))
        if isinstance(op, Join):
            return Join(tuple(rn(x) for x in op.xs))
        return op

    def walk_block(b: Block) -> Block:
        return Block(rn(b.param), walk(b.body))

    def walk(prog: Program) -> Program:
        return Program(
            tuple(Stmt(tuple(rn(t) for t in s.targets), walk_op(s.op)) for s in prog.stmts),
            rn(prog.ret),
        )

    return walk(p)


class Fresh:
    """Monotone variable-id allocator.  One per rewrite context; seeded past
    every id occurring in the program so freshened names never collide."""

    def __init__(self, start: int = 0):
        self._next = start

    @classmethod
    def for_program(cls, p: Program) -> "Fresh":
        return cls(max_var_id(p) + 1)

    def var(self) -> VarId:
        v = self._next
        self._next += 1
        return v

    @property
    def next_id(self) -> int:
        return self._next


def freshen(b: Block, fresh: Fresh) -> Block:
    """Copy of ``b`` with every bound variable replaced by a fresh one.

    Free variables are untouched, so the copy can be spliced anywhere the
    original block's enclosing scope is visible.
    """
    bound = set(bound_vars(b.body)) | {b.param}
    mapping = {x: fresh.var() for x in sorted(bound)}
    renamed = rename_vars(b.body, mapping)
    return Block(mapping[b.param], renamed)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    site: tuple | None = None

    def __str__(self) -> str:
        loc = "" if self.site is None else f" at {'.'.join(map(str, self.site))}"
        return f"{self.code}: {self.message}{loc}"


def validate(p: Program, ft: FuncTable) -> list[Diagnostic]:
    """Check the single-binding and scoping invariants.

    Returns an empty list iff the program is well formed.  Diagnostics name
    the offending variable and the statement path where it was detected.
    """
    diags: list[Diagnostic] = []
    seen: set[VarId] = set()

    def bind(x: VarId, site: tuple) -> None:
        if x in seen:
            diags.append(Diagnostic("duplicate-binding", f"duplicate binding: {x}", site))
        seen.add(x)

    def walk(prog: Program, scope: set[VarId], path: tuple) -> None:
        local = set(scope)
        for idx, s in enumerate(prog.stmts):
            site = path + (idx,)
            for x in op_inputs(s.op):
                if x not in local:
                    diags.append(Diagnostic("unbound-var", f"unbound variable: {x}", site))
            if isinstance(s.op, Call) and s.op.func not in ft:
                diags.append(
                    Diagnostic("unknown-func", f"unknown function id: {s.op.func}", site))
            if isinstance(s.op, AbsList):
                for c, flag in s.op.items:
                    if not isinstance(flag, bool):
                        diags.append(
                            Diagnostic("bad-certainty", f"certainty flag must be bool: {flag!r}", site))
                    if not is_const(c):
                        diags.append(Diagnostic("bad-const", f"not a constant: {c!r}", site))
            if isinstance(s.op, Prim) and not is_const(s.op.c):
                diags.append(Diagnostic("bad-const", f"not a constant: {s.op.c!r}", site))
            for slot, b in zip(_block_slots(s.op), op_blocks(s.op)):
                bind(b.param, site + (slot,))
                walk(b.body, local | {b.param}, site + (slot,))
            for t in s.targets:
                bind(t, site)
            local.update(s.targets)
        if prog.ret not in local:
            label = "unbound return" if path == () else "unbound block return"
            diags.append(Diagnostic("unbound-return", f"{label}: {prog.ret}", path))

    walk(p, set(), ())
    return diags


def _block_slots(op: Op) -> tuple[str, ...]:
    if isinstance(op, Fold):
        return ("fold",)
    if isinstance(op, If):
        return ("then", "else")
    return ()


# ---------------------------------------------------------------------------
# canonical text format
# ---------------------------------------------------------------------------
#
# funcs:
# <id> <name> <purity> <arity>
# prog:
# <targets> <- TAG(<args>)
# ret x<id>
#
# Targets are `x<id>` or `(x<id>, x<id>, ...)`.  Constants are JSON literals.
# Blocks are inline: `{x<id> => <stmt>; <stmt>; ret x<id>}`.  Output is
# deterministic: functions sorted by id, abstract sets in canonical order.


def serialize(p: Program, ft: FuncTable) -> str:
    lines = ["funcs:"]
    for d in ft.decls():
        arity = "var" if d.arity is None else str(d.arity)
        lines.append(f"{d.func_id} {d.name} {d.purity_text} {arity}")
    lines.append("prog:")
    for s in p.stmts:
        lines.append(_stmt_text(s))
    lines.append(f"ret x{p.ret}")
    return "\n".join(lines) + "\n"


def _targets_text(targets: tuple[VarId, ...]) -> str:
    if len(targets) == 1:
        return f"x{targets[0]}"
    return "(" + ", ".join(f"x{t}" for t in targets) + ")"


def _stmt_text(s: Stmt) -> str:
    return f"{_targets_text(s.targets)} <- {_op_text(s.op)}"


def _block_text(b: Block) -> str:
    parts = [_stmt_text(s) for s in b.body.stmts]
    parts.append(f"ret x{b.body.ret}")
    return "{x" + str(b.param) + " => " + "; ".join(parts) + "}"


def _op_text(op: Op) -> str:
    if isinstance(op, Prim):
        return f"PRIM({const_to_text(op.c)})"
    if isinstance(op, Alias):
        return f"ALIAS(x{op.x})"
    if isinstance(op, MkTuple):
        return "TUPLE(" + ", ".join(f"x{x}" for x in op.xs) + ")"
    if isinstance(op, Call):
        return f"CALL({op.func}, x{op.arg})"
    if isinstance(op, Proj):
        return f"PROJ({op.i}, x{op.x})"
    if isinstance(op, Fold):
        return f"FOLD(x{op.subject}, x{op.init}, {_block_text(op.body)})"
    if isinstance(op, If):
        return f"IF(x{op.cond}, {_block_text(op.then_blk)}, {_block_text(op.else_blk)})"
    if isinstance(op, Pending):
        return f"PENDING({op.task})"
    if isinstance(op, AbsPrim):
        return "ABSPRIM(" + ", ".join(const_to_text(c) for c in op.choices) + ")"
    if isinstance(op, AbsList):
        return "ABSLIST(" + ", ".join(
            f"[{const_to_text(c)}, {const_to_text(flag)}]" for c, flag in op.items) + ")"
    if isinstance(op, Join):
        return "JOIN(" + ", ".join(f"x{x}" for x in op.xs) + ")"
    raise IrError(f"cannot serialize op {op!r}")


class _Cursor:
    """Single-line scanner used for statement parsing."""

    def __init__(self, text: str, line: int):
        self.text = text
        self.pos = 0
        self.line = line

    def error(self, message: str) -> ParseError:
        return ParseError(message, self.line, self.pos + 1)

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_ws(self) -> None:
        while not self.eof() and self.text[self.pos] in " \t":
            self.pos += 1

    def expect(self, token: str) -> None:
        self.skip_ws()
        if not self.text.startswith(token, self.pos):
            raise self.error(f"expected {token!r}")
        self.pos += len(token)

    def try_consume(self, token: str) -> bool:
        self.skip_ws()
        if self.text.startswith(token, self.pos):
            self.pos += len(token)
            return True
        return False

    def var(self) -> VarId:
        self.skip_ws()
        if self.peek() != "x":
            raise self.error("expected variable like x3")
        start = self.pos + 1
        end = start
        while end < len(self.text) and self.text[end].isdigit():
            end += 1
        if end == start:
            raise self.error("expected variable like x3")
        self.pos = end
        return int(self.text[start:end])

    def integer(self) -> int:
        self.skip_ws()
        start = self.pos
        if self.peek() == "-":
            self.pos += 1
        while not self.eof() and self.text[self.pos].isdigit():
            self.pos += 1
        if self.pos == start or (self.pos == start + 1 and self.text[start] == "-"):
            raise self.error("expected integer")
        return int(self.text[start:self.pos])

    def ident(self) -> str:
        self.skip_ws()
        start = self.pos
        while not self.eof() and (self.text[self.pos].isalnum() or self.text[self.pos] in "_"):
            self.pos += 1
        if self.pos == start:
            raise self.error("expected name")
        return self.text[start:self.pos]

    def json_const(self) -> Const:
        self.skip_ws()
        try:
            value, end = json.JSONDecoder().raw_decode(self.text, self.pos)
        except json.JSONDecodeError as exc:
            raise self.error(f"bad constant: {exc.msg}") from None
        self.pos = end
        if not is_const(value):
            raise self.error(f"not a constant: {value!r}")
        return value


def _parse_targets(cur: _Cursor) -> tuple[VarId, ...]:
    cur.skip_ws()
    if cur.peek() == "(":
        cur.expect("(")
        ts = [cur.var()]
        while cur.try_consume(","):
            ts.append(cur.var())
        cur.expect(")")
        return tuple(ts)
    return (cur.var(),)


def _parse_var_list(cur: _Cursor) -> tuple[VarId, ...]:
    xs: list[VarId] = []
    cur.skip_ws()
    if cur.peek() == ")":
        return ()
    xs.append(cur.var())
    while cur.try_consume(","):
        xs.append(cur.var())
    return tuple(xs)


def _parse_block(cur: _Cursor) -> Block:
    cur.expect("{")
    param = cur.var()
    cur.expect("=>")
    stmts: list[Stmt] = []
    while True:
        cur.skip_ws()
        if cur.text.startswith("ret", cur.pos) and not (
                cur.text[cur.pos + 3:cur.pos + 4].isalnum()):
            cur.pos += 3
            ret = cur.var()
            cur.expect("}")
            return Block(param, Program(tuple(stmts), ret))
        stmts.append(_parse_stmt(cur))
        cur.expect(";")


def _parse_op(cur: _Cursor) -> Op:
    cur.skip_ws()
    start = cur.pos
    tag = ""
    while not cur.eof() and cur.text[cur.pos].isupper():
        tag += cur.text[cur.pos]
        cur.pos += 1
    if not tag:
        raise cur.error("expected op tag")
    cur.expect("(")
    if tag == "PRIM":
        c = cur.json_const()
        cur.expect(")")
        return Prim(c)
    if tag == "ALIAS":
        x = cur.var()
        cur.expect(")")
        return Alias(x)
    if tag == "TUPLE":
        xs = _parse_var_list(cur)
        cur.expect(")")
        return MkTuple(xs)
    if tag == "CALL":
        f = cur.integer()
        cur.expect(",")
        x = cur.var()
        cur.expect(")")
        return Call(f, x)
    if tag == "PROJ":
        i = cur.integer()
        cur.expect(",")
        x = cur.var()
        cur.expect(")")
        return Proj(i, x)
    if tag == "FOLD":
        subject = cur.var()
        cur.expect(",")
        init = cur.var()
        cur.expect(",")
        body = _parse_block(cur)
        cur.expect(")")
        return Fold(subject, init, body)
    if tag == "IF":
        cond = cur.var()
        cur.expect(",")
        then_blk = _parse_block(cur)
        cur.expect(",")
        else_blk = _parse_block(cur)
        cur.expect(")")
        return If(cond, then_blk, else_blk)
    if tag == "PENDING":
        t = cur.integer()
        cur.expect(")")
        return Pending(t)
    if tag == "ABSPRIM":
        cs = [cur.json_const()]
        while cur.try_consume(","):
            cs.append(cur.json_const())
        cur.expect(")")
        return AbsPrim(tuple(cs))
    if tag == "ABSLIST":
        items: list[tuple[Const, bool]] = []
        cur.skip_ws()
        if cur.peek() != ")":
            while True:
                cur.expect("[")
                c = cur.json_const()
                cur.expect(",")
                flag = cur.json_const()
                if not isinstance(flag, bool):
                    raise cur.error("certainty flag must be true or false")
                cur.expect("]")
                items.append((c, flag))
                if not cur.try_consume(","):
                    break
        cur.expect(")")
        return AbsList(tuple(items))
    if tag == "JOIN":
        xs = _parse_var_list(cur)
        cur.expect(")")
        return Join(xs)
    cur.pos = start
    raise cur.error(f"unknown op tag {tag!r}")


def _parse_stmt(cur: _Cursor) -> Stmt:
    targets = _parse_targets(cur)
    cur.expect("<-")
    op = _parse_op(cur)
    return Stmt(targets, op)


def deserialize(text: str) -> tuple[Program, FuncTable]:
    """Inverse of :func:`serialize`; rejects malformed input with line/col
    positions."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "funcs:":
        raise ParseError("expected 'funcs:' header", 1, 1)
    ft = FuncTable()
    i = 1
    while i < len(lines) and lines[i].strip() != "prog:":
        raw = lines[i].strip()
        i += 1
        if not raw:
            continue
        parts = raw.split()
        if len(parts) != 4:
            raise ParseError("expected '<id> <name> <purity> <arity>'", i, 1)
        fid_text, name, purity, arity_text = parts
        try:
            fid = int(fid_text)
        except ValueError:
            raise ParseError(f"bad function id {fid_text!r}", i, 1) from None
        if purity not in PURITY_NAMES:
            raise ParseError(f"bad purity {purity!r}", i, 1)
        if arity_text == "var":
            arity: int | None = None
        else:
            try:
                arity = int(arity_text)
            except ValueError:
                raise ParseError(f"bad arity {arity_text!r}", i, 1) from None
        try:
            ft.add(FuncDecl(fid, name, purity == "pure", arity, purity == "preapproved"))
        except IrError as exc:
            raise ParseError(str(exc), i, 1) from None
    if i >= len(lines):
        raise ParseError("expected 'prog:' section", len(lines), 1)
    i += 1  # skip prog:
    stmts: list[Stmt] = []
    ret: VarId | None = None
    while i < len(lines):
        raw = lines[i]
        lineno = i + 1
        i += 1
        if not raw.strip():
            continue
        cur = _Cursor(raw, lineno)
        cur.skip_ws()
        if raw.strip().startswith("ret"):
            cur.expect("ret")
            ret = cur.var()
            cur.skip_ws()
            if not cur.eof():
                raise cur.error("trailing text after return")
            break
        stmts.append(_parse_stmt(cur))
        cur.skip_ws()
        if not cur.eof():
            raise cur.error("trailing text after statement")
    if ret is None:
        raise ParseError("missing 'ret' line", len(lines), 1)
    for j in range(i, len(lines)):
        if lines[j].strip():
            raise ParseError("text after 'ret' line", j + 1, 1)
    return Program(tuple(stmts), ret), ft
