"""Pure built-in functions evaluated in place by the rewrite engine.

Builtins operate on host Python values (what ``value_to_py`` produces) and
follow Python semantics exactly, so the sequential reference interpreter and
the rewrite engine cannot disagree on them.  They are registered in a
``FuncTable`` like any other function, just flagged pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .ir import FuncDecl, FuncTable


class LoopBudgetError(Exception):
    """A bounded loop was still running when its iteration budget ran out."""


def _while_budget(active) -> bool:
    if active:
        raise LoopBudgetError("loop exceeded its iteration budget")
    return True


@dataclass(frozen=True)
class Builtin:
    name: str
    arity: int | None  # None = variadic
    fn: Callable


_DEFS = [
    Builtin("eq", 2, lambda a, b: a == b),
    Builtin("ne", 2, lambda a, b: a != b),
    Builtin("lt", 2, lambda a, b: a < b),
    Builtin("le", 2, lambda a, b: a <= b),
    Builtin("gt", 2, lambda a, b: a > b),
    Builtin("ge", 2, lambda a, b: a >= b),
    Builtin("add", 2, lambda a, b: a + b),
    Builtin("sub", 2, lambda a, b: a - b),
    Builtin("mul", 2, lambda a, b: a * b),
    Builtin("div", 2, lambda a, b: a / b),
    Builtin("floordiv", 2, lambda a, b: a // b),
    Builtin("mod", 2, lambda a, b: a % b),
    Builtin("neg", 1, lambda a: -a),
    Builtin("pos", 1, lambda a: +a),
    Builtin("not", 1, lambda a: not a),
    Builtin("truthy", 1, lambda a: bool(a)),
    Builtin("in", 2, lambda item, container: item in container),
    Builtin("len", 1, lambda a: len(a)),
    Builtin("index", 2, lambda container, i: container[i]),
    Builtin("list", None, lambda *items: list(items)),
    Builtin("while_budget", 1, _while_budget),
]

BUILTINS: dict[str, Builtin] = {b.name: b for b in _DEFS}


def register_builtins(ft: FuncTable) -> dict[str, FuncDecl]:
    """Ensure every builtin is declared in ``ft``; return name -> decl."""
    return {b.name: ft.register(b.name, pure=True, arity=b.arity) for b in _DEFS}


def builtin_table() -> FuncTable:
    ft = FuncTable()
    register_builtins(ft)
    return ft


def eval_builtin(name: str, args: tuple) -> object:
    """Apply a builtin to already-unwrapped Python arguments."""
    b = BUILTINS[name]
    if b.arity is not None and len(args) != b.arity:
        raise TypeError(f"{name} expects {b.arity} arguments, got {len(args)}")
    return b.fn(*args)
