"""termflow: rewrite-driven execution of agent tool programs.

A restricted Python subset is lowered to a single-assignment functional IR.
A term-rewriting engine normalizes programs, surfacing external tool calls
in parallel batches for approval and dispatch, and optionally propagates
set-valued results from calibrated classifiers through the whole program.
"""

from .ir import (
    AbsList,
    AbsListResult,
    AbsPrim,
    Alias,
    Block,
    Call,
    Const,
    Diagnostic,
    Fold,
    FuncDecl,
    FuncTable,
    If,
    IrError,
    Join,
    Leaf,
    LeafSet,
    MkTuple,
    ParseError,
    Pending,
    Prim,
    Program,
    Proj,
    Stmt,
    Tup,
    TupSet,
    Value,
    deserialize,
    freshen,
    serialize,
    stmt,
    validate,
)

__all__ = [
    "AbsList", "AbsListResult", "AbsPrim", "Alias", "Block", "Call", "Const",
    "Diagnostic", "Fold", "FuncDecl", "FuncTable", "If", "IrError", "Join",
    "Leaf", "LeafSet", "MkTuple", "ParseError", "Pending", "Prim", "Program",
    "Proj", "Stmt", "Tup", "TupSet", "Value", "deserialize", "freshen",
    "serialize", "stmt", "validate",
]

__version__ = "0.1.0"
