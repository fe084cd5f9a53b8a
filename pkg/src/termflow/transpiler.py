"""Source-language front end: parse a restricted imperative subset, lower
it to the IR, and evaluate it sequentially as a differential oracle.

The accepted subset is deliberately small: assignments, expression
statements, if/elif/else, for-in, while, and one trailing return.  Loops
may not contain break, continue, or return.  Imperative variable updates
under control flow become functional merges: an if yields the tuple of
variables either branch updates, a for-loop threads updated variables
through a fold accumulator, and a while becomes a fold over a bounded
iteration list guarded by an active flag.
"""

from __future__ import annotations

import ast as _pyast
import io
import tokenize
from dataclasses import dataclass, field

from .builtins import BUILTINS, LoopBudgetError, eval_builtin, register_builtins
from .ir import (
    Block,
    Call,
    Const,
    Fold,
    Fresh,
    FuncTable,
    If,
    Leaf,
    MkTuple,
    Prim,
    Program,
    Proj,
    Stmt,
    Tup,
    Value,
    VarId,
    is_const,
    py_to_value,
    stmt,
    value_to_py,
)
from .toolsenv import Environment

DEFAULT_LOOP_BUDGET = 1000

Pos = tuple[int, int]  # 1-based line, 1-based column


class SourceError(Exception):
    """Parse or lowering failure; one `file:line:col: code: message` per
    diagnostic."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("\n".join(diagnostics))
        self.diagnostics = diagnostics


def _diag(filename: str, pos: Pos, code: str, message: str) -> str:
    return f"{filename}:{pos[0]}:{pos[1]}: {code}: {message}"


# ---------------------------------------------------------------------------
# source AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ELit:
    value: Const
    pos: Pos


@dataclass(frozen=True)
class EName:
    name: str
    pos: Pos


@dataclass(frozen=True)
class EList:
    items: tuple
    pos: Pos


@dataclass(frozen=True)
class ETuple:
    items: tuple
    pos: Pos


@dataclass(frozen=True)
class ECall:
    func: str
    args: tuple
    pos: Pos


@dataclass(frozen=True)
class EMethod:
    recv: object
    name: str
    args: tuple
    pos: Pos


@dataclass(frozen=True)
class EIndex:
    recv: object
    index: object
    pos: Pos


@dataclass(frozen=True)
class EUnary:
    op: str  # "-" | "+" | "not"
    operand: object
    pos: Pos


@dataclass(frozen=True)
class EBinary:
    op: str  # == != < <= > >= + - * / // % in
    left: object
    right: object
    pos: Pos


@dataclass(frozen=True)
class EBoolOp:
    op: str  # "and" | "or"
    left: object
    right: object
    pos: Pos


@dataclass(frozen=True)
class SAssign:
    name: str
    expr: object
    pos: Pos


@dataclass(frozen=True)
class SExpr:
    expr: object
    pos: Pos


@dataclass(frozen=True)
class SReturn:
    expr: object
    pos: Pos


@dataclass(frozen=True)
class SIf:
    cond: object
    then: tuple
    orelse: tuple
    pos: Pos


@dataclass(frozen=True)
class SFor:
    var: str
    subject: object
    body: tuple
    pos: Pos


@dataclass(frozen=True)
class SWhile:
    cond: object
    body: tuple
    pos: Pos


@dataclass(frozen=True)
class SPass:
    pos: Pos


@dataclass(frozen=True)
class SrcModule:
    body: tuple
    filename: str


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_KEYWORDS = {"if", "elif", "else", "for", "while", "return", "pass", "in",
             "and", "or", "not", "True", "False", "None"}
_REJECTED_KEYWORDS = {
    "break": "break statement", "continue": "continue statement",
    "def": "function definition", "class": "class definition",
    "import": "import", "from": "import", "lambda": "lambda",
    "try": "exception handling", "raise": "exception handling",
    "with": "with statement", "assert": "assert statement",
    "del": "del statement", "global": "global statement",
    "nonlocal": "nonlocal statement", "yield": "yield",
    "async": "async", "await": "await", "match": "match statement",
    "is": "identity comparison",
}

_COMPARE_OPS = {"==", "!=", "<", "<=", ">", ">="}
_ADD_OPS = {"+", "-"}
_MUL_OPS = {"*", "/", "//", "%"}


class _Tok:
    __slots__ = ("type", "string", "pos")

    def __init__(self, type_, string, pos):
        self.type = type_
        self.string = string
        self.pos = pos


class _Parser:
    def __init__(self, text: str, filename: str):
        self.filename = filename
        self.toks = self._lex(text)
        self.i = 0
        self.loop_depth = 0

    def _lex(self, text: str) -> list[_Tok]:
        out: list[_Tok] = []
        try:
            for tok in tokenize.generate_tokens(io.StringIO(text).readline):
                if tok.type in (tokenize.COMMENT, tokenize.NL):
                    continue
                if tok.type == tokenize.ENDMARKER:
                    break
                pos = (tok.start[0], tok.start[1] + 1)
                name = tokenize.tok_name[tok.type]
                if name.startswith("FSTRING"):
                    raise SourceError([_diag(self.filename, pos, "unsupported", "f-string")])
                if tok.type not in (tokenize.NAME, tokenize.NUMBER, tokenize.STRING,
                                    tokenize.OP, tokenize.NEWLINE, tokenize.INDENT,
                                    tokenize.DEDENT):
                    raise SourceError([_diag(self.filename, pos, "syntax",
                                             f"unexpected token {tok.string!r}")])
                out.append(_Tok(tok.type, tok.string, pos))
        except tokenize.TokenError as exc:
            pos = getattr(exc, "args", ((0, 0),) * 2)[-1]
            line, col = pos if isinstance(pos, tuple) else (1, 1)
            raise SourceError([_diag(self.filename, (line, col + 1), "syntax",
                                     str(exc.args[0]))]) from None
        except IndentationError as exc:
            raise SourceError([_diag(self.filename, (exc.lineno or 1, exc.offset or 1),
                                     "syntax", exc.msg)]) from None
        out.append(_Tok(tokenize.ENDMARKER, "", out[-1].pos if out else (1, 1)))
        return out

    # -- token plumbing ----------------------------------------------------

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def at(self, type_, string=None) -> bool:
        tok = self.peek()
        return tok.type == type_ and (string is None or tok.string == string)

    def at_name(self, *names: str) -> bool:
        tok = self.peek()
        return tok.type == tokenize.NAME and tok.string in names

    def expect(self, type_, string=None) -> _Tok:
        tok = self.peek()
        if tok.type != type_ or (string is not None and tok.string != string):
            want = string if string is not None else tokenize.tok_name[type_]
            raise self.error(tok.pos, "syntax", f"expected {want!r}, got {tok.string!r}")
        return self.advance()

    def error(self, pos: Pos, code: str, message: str) -> SourceError:
        return SourceError([_diag(self.filename, pos, code, message)])

    # -- statements --------------------------------------------------------

    def parse_module(self) -> tuple:
        body = []
        while not self.at(tokenize.ENDMARKER):
            if self.at(tokenize.NEWLINE):
                self.advance()
                continue
            body.append(self.parse_stmt())
        return tuple(body)

    def parse_stmt(self):
        tok = self.peek()
        if tok.type == tokenize.NAME:
            if tok.string in _REJECTED_KEYWORDS:
                raise self.error(tok.pos, "unsupported", _REJECTED_KEYWORDS[tok.string])
            if tok.string == "if":
                return self.parse_if()
            if tok.string == "for":
                return self.parse_for()
            if tok.string == "while":
                return self.parse_while()
        node = self.parse_simple_stmt()
        self.expect(tokenize.NEWLINE)
        return node

    def parse_simple_stmt(self):
        tok = self.peek()
        if tok.type == tokenize.NAME:
            if tok.string in _REJECTED_KEYWORDS:
                raise self.error(tok.pos, "unsupported", _REJECTED_KEYWORDS[tok.string])
            if tok.string == "return":
                if self.loop_depth:
                    raise self.error(tok.pos, "unsupported", "return inside a loop body")
                self.advance()
                return SReturn(self.parse_expr(), tok.pos)
            if tok.string == "pass":
                self.advance()
                return SPass(tok.pos)
        # assignment or expression statement
        start = self.i
        if tok.type == tokenize.NAME and tok.string not in _KEYWORDS:
            name_tok = self.advance()
            nxt = self.peek()
            if nxt.type == tokenize.OP and nxt.string == "=":
                self.advance()
                return SAssign(name_tok.string, self.parse_expr(), name_tok.pos)
            if nxt.type == tokenize.OP and len(nxt.string) == 2 and nxt.string[1] == "=" \
                    and nxt.string[0] in "+-*/%&|^@":
                raise self.error(nxt.pos, "unsupported", "augmented assignment")
            self.i = start
        expr = self.parse_expr()
        nxt = self.peek()
        if nxt.type == tokenize.OP and nxt.string == "=":
            raise self.error(nxt.pos, "unsupported",
                             "assignment target must be a plain name")
        if nxt.type == tokenize.OP and nxt.string == ",":
            raise self.error(nxt.pos, "unsupported", "tuple assignment")
        return SExpr(expr, tok.pos)

    def parse_suite(self) -> tuple:
        self.expect(tokenize.OP, ":")
        if not self.at(tokenize.NEWLINE):
            node = self.parse_simple_stmt()  # single-line suite
            self.expect(tokenize.NEWLINE)
            return (node,)
        self.advance()
        self.expect(tokenize.INDENT)
        body = []
        while not self.at(tokenize.DEDENT):
            if self.at(tokenize.NEWLINE):
                self.advance()
                continue
            body.append(self.parse_stmt())
        self.advance()  # DEDENT
        if not body:
            raise self.error(self.peek().pos, "syntax", "empty block")
        return tuple(body)

    def parse_if(self) -> SIf:
        tok = self.expect(tokenize.NAME, "if")
        cond = self.parse_expr()
        then = self.parse_suite()
        orelse: tuple = ()
        if self.at_name("elif"):
            elif_tok = self.peek()
            self.advance()
            self.i -= 1  # rewind so parse_if sees a fresh 'if'-shaped head
            self.toks[self.i] = _Tok(tokenize.NAME, "if", elif_tok.pos)
            orelse = (self.parse_if(),)
        elif self.at_name("else"):
            self.advance()
            orelse = self.parse_suite()
        return SIf(cond, then, orelse, tok.pos)

    def parse_for(self) -> SFor:
        tok = self.expect(tokenize.NAME, "for")
        var = self.expect(tokenize.NAME)
        if var.string in _KEYWORDS or var.string in _REJECTED_KEYWORDS:
            raise self.error(var.pos, "syntax", f"bad loop variable {var.string!r}")
        self.expect(tokenize.NAME, "in")
        subject = self.parse_expr()
        self.loop_depth += 1
        try:
            body = self.parse_suite()
        finally:
            self.loop_depth -= 1
        return SFor(var.string, subject, body, tok.pos)

    def parse_while(self) -> SWhile:
        tok = self.expect(tokenize.NAME, "while")
        cond = self.parse_expr()
        self.loop_depth += 1
        try:
            body = self.parse_suite()
        finally:
            self.loop_depth -= 1
        return SWhile(cond, body, tok.pos)

    # -- expressions ---------------------------------------------------------

    def parse_expr(self):
        return self.parse_or()

    def parse_or(self):
        node = self.parse_and()
        while self.at_name("or"):
            pos = self.advance().pos
            node = EBoolOp("or", node, self.parse_and(), pos)
        return node

    def parse_and(self):
        node = self.parse_not()
        while self.at_name("and"):
            pos = self.advance().pos
            node = EBoolOp("and", node, self.parse_not(), pos)
        return node

    def parse_not(self):
        if self.at_name("not"):
            pos = self.advance().pos
            return EUnary("not", self.parse_not(), pos)
        return self.parse_comparison()

    def parse_comparison(self):
        node = self.parse_arith()
        tok = self.peek()
        op = None
        if tok.type == tokenize.OP and tok.string in _COMPARE_OPS:
            op = tok.string
            self.advance()
        elif self.at_name("in"):
            op = "in"
            self.advance()
        elif self.at_name("not") and self._peek2_is("in"):
            self.advance()
            self.advance()
            op = "not in"
        if op is None:
            return node
        pos = tok.pos
        right = self.parse_arith()
        nxt = self.peek()
        if (nxt.type == tokenize.OP and nxt.string in _COMPARE_OPS) or self.at_name("in"):
            raise self.error(nxt.pos, "unsupported", "chained comparison")
        if op == "not in":
            return EUnary("not", EBinary("in", node, right, pos), pos)
        return EBinary(op, node, right, pos)

    def _peek2_is(self, string: str) -> bool:
        tok = self.toks[self.i + 1]
        return tok.type == tokenize.NAME and tok.string == string

    def parse_arith(self):
        node = self.parse_term()
        while self.at(tokenize.OP) and self.peek().string in _ADD_OPS:
            tok = self.advance()
            node = EBinary(tok.string, node, self.parse_term(), tok.pos)
        return node

    def parse_term(self):
        node = self.parse_unary()
        while self.at(tokenize.OP) and self.peek().string in _MUL_OPS:
            tok = self.advance()
            node = EBinary(tok.string, node, self.parse_unary(), tok.pos)
        return node

    def parse_unary(self):
        tok = self.peek()
        if tok.type == tokenize.OP and tok.string in ("-", "+"):
            self.advance()
            return EUnary(tok.string, self.parse_unary(), tok.pos)
        return self.parse_postfix()

    def parse_postfix(self):
        node = self.parse_atom()
        while True:
            tok = self.peek()
            if tok.type != tokenize.OP:
                return node
            if tok.string == ".":
                self.advance()
                name = self.expect(tokenize.NAME)
                if not self.at(tokenize.OP, "("):
                    raise self.error(name.pos, "unsupported",
                                     "attribute access without a call")
                args = self.parse_args()
                node = EMethod(node, name.string, args, tok.pos)
            elif tok.string == "(":
                if not isinstance(node, EName):
                    raise self.error(tok.pos, "unsupported",
                                     "call of a computed expression")
                args = self.parse_args()
                node = ECall(node.name, args, node.pos)
            elif tok.string == "[":
                self.advance()
                index = self.parse_expr()
                self.expect(tokenize.OP, "]")
                node = EIndex(node, index, tok.pos)
            else:
                return node

    def parse_args(self) -> tuple:
        self.expect(tokenize.OP, "(")
        args = []
        while not self.at(tokenize.OP, ")"):
            tok = self.peek()
            if tok.type == tokenize.OP and tok.string == "*":
                raise self.error(tok.pos, "unsupported", "star argument")
            if tok.type == tokenize.NAME and self.toks[self.i + 1].string == "=" \
                    and self.toks[self.i + 1].type == tokenize.OP:
                raise self.error(tok.pos, "unsupported", "keyword argument")
            args.append(self.parse_expr())
            if not self.at(tokenize.OP, ","):
                break
            self.advance()
        self.expect(tokenize.OP, ")")
        return tuple(args)

    def parse_atom(self):
        tok = self.peek()
        if tok.type == tokenize.NUMBER:
            self.advance()
            text = tok.string
            if text.endswith(("j", "J")):
                raise self.error(tok.pos, "unsupported", "complex literal")
            try:
                if any(ch in text for ch in ".eE") and not text.lower().startswith("0x"):
                    return ELit(float(text), tok.pos)
                return ELit(int(text, 0), tok.pos)
            except ValueError:
                raise self.error(tok.pos, "syntax", f"bad number {text!r}") from None
        if tok.type == tokenize.STRING:
            self.advance()
            quote_at = min(i for i in (tok.string.find("'"), tok.string.find('"'))
                           if i >= 0)
            prefix = tok.string[:quote_at].lower()
            if "b" in prefix or "f" in prefix:
                # bytes / f-strings are out; bare and raw strings only
                raise self.error(tok.pos, "unsupported", "string prefix")
            try:
                value = _pyast.literal_eval(tok.string)
            except (ValueError, SyntaxError):
                raise self.error(tok.pos, "unsupported", "string literal") from None
            if not isinstance(value, str):
                raise self.error(tok.pos, "unsupported", "string literal")
            return ELit(value, tok.pos)
        if tok.type == tokenize.NAME:
            if tok.string in _REJECTED_KEYWORDS:
                raise self.error(tok.pos, "unsupported", _REJECTED_KEYWORDS[tok.string])
            if tok.string == "True":
                self.advance()
                return ELit(True, tok.pos)
            if tok.string == "False":
                self.advance()
                return ELit(False, tok.pos)
            if tok.string == "None":
                self.advance()
                return ELit(None, tok.pos)
            if tok.string in _KEYWORDS:
                raise self.error(tok.pos, "syntax", f"unexpected {tok.string!r}")
            self.advance()
            return EName(tok.string, tok.pos)
        if tok.type == tokenize.OP and tok.string == "(":
            self.advance()
            if self.at(tokenize.OP, ")"):
                self.advance()
                return ETuple((), tok.pos)
            items = [self.parse_expr()]
            is_tuple = False
            while self.at(tokenize.OP, ","):
                is_tuple = True
                self.advance()
                if self.at(tokenize.OP, ")"):
                    break
                items.append(self.parse_expr())
            self.expect(tokenize.OP, ")")
            if is_tuple:
                return ETuple(tuple(items), tok.pos)
            return items[0]
        if tok.type == tokenize.OP and tok.string == "[":
            self.advance()
            items = []
            while not self.at(tokenize.OP, "]"):
                items.append(self.parse_expr())
                if not self.at(tokenize.OP, ","):
                    break
                self.advance()
            self.expect(tokenize.OP, "]")
            return EList(tuple(items), tok.pos)
        if tok.type == tokenize.OP and tok.string == "{":
            raise self.error(tok.pos, "unsupported", "dict/set display")
        raise self.error(tok.pos, "syntax", f"unexpected {tok.string!r}")


def parse_source(text: str, filename: str = "<src>") -> SrcModule:
    parser = _Parser(text, filename)
    return SrcModule(parser.parse_module(), filename)


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------


class _LoopDead:
    """Sentinel for names whose post-loop value Python leaves undefined or
    iteration-dependent in ways the IR cannot mirror statically."""

    def __repr__(self):
        return "<loop-dead>"


_LOOP_DEAD = _LoopDead()


def _assigned_in(stmts) -> set[str]:
    names: set[str] = set()
    for s in stmts:
        if isinstance(s, SAssign):
            names.add(s.name)
        elif isinstance(s, SIf):
            names |= _assigned_in(s.then) | _assigned_in(s.orelse)
        elif isinstance(s, SFor):
            names.add(s.var)
            names |= _assigned_in(s.body)
        elif isinstance(s, SWhile):
            names |= _assigned_in(s.body)
    return names


class _Lowerer:
    def __init__(self, ft: FuncTable, filename: str, loop_budget: int,
                 inputs: dict[str, Const]):
        self.ft = ft
        self.filename = filename
        self.loop_budget = loop_budget
        self.inputs = inputs
        self.fresh = Fresh(0)
        self.builtins = register_builtins(ft)

    def fail(self, pos: Pos, code: str, message: str):
        raise SourceError([_diag(self.filename, pos, code, message)])

    def lower_module(self, module: SrcModule) -> Program:
        out: list[Stmt] = []
        names: dict[str, object] = {}
        for name in sorted(self.inputs):
            c = self.inputs[name]
            if not is_const(c):
                raise SourceError([_diag(self.filename, (1, 1), "input",
                                         f"input {name!r} is not a constant")])
            v = self.fresh.var()
            out.append(stmt(v, Prim(c)))
            names[name] = v
        body = module.body
        if not body or not isinstance(body[-1], SReturn):
            pos = body[-1].pos if body else (1, 1)
            self.fail(pos, "lowering", "program must end with a return statement")
        for s in body[:-1]:
            if isinstance(s, SReturn):
                self.fail(s.pos, "lowering", "return must be the final statement")
            self.lower_stmt(s, names, out)
        ret = self.lower_expr(body[-1].expr, names, out)
        return Program(tuple(out), ret)

    # -- helpers -------------------------------------------------------------

    def read(self, name: str, pos: Pos, names: dict) -> VarId:
        if name not in names:
            self.fail(pos, "lowering", f"undefined variable {name!r}")
        v = names[name]
        if v is _LOOP_DEAD:
            self.fail(pos, "lowering",
                      f"{name!r} needs a definition before the loop to be used after it")
        return v  # type: ignore[return-value]

    def pure(self, name: str, args: list[VarId], out: list[Stmt]) -> VarId:
        t = self.fresh.var()
        out.append(stmt(t, MkTuple(tuple(args))))
        r = self.fresh.var()
        out.append(stmt(r, Call(self.builtins[name].func_id, t)))
        return r

    def external(self, fn_name: str, args: list[VarId], out: list[Stmt]) -> VarId:
        decl = self.ft.by_name(fn_name)
        if decl is None:
            decl = self.ft.register(fn_name, pure=False, arity=None)
        t = self.fresh.var()
        out.append(stmt(t, MkTuple(tuple(args))))
        r = self.fresh.var()
        out.append(stmt(r, Call(decl.func_id, t)))
        return r

    def _pack(self, merged: list[str], names: dict, out: list[Stmt],
              pos: Pos) -> VarId:
        """Return variable carrying the (possibly empty/singleton) tuple of
        current values of ``merged``."""
        vs = [self.read(u, pos, names) for u in merged]
        if len(vs) == 1:
            return vs[0]
        v = self.fresh.var()
        out.append(stmt(v, MkTuple(tuple(vs))))
        return v

    def _bind_merged(self, merged: list[str], names: dict, op, out: list[Stmt]) -> None:
        """Bind an If/Fold op's result to fresh variables for ``merged``."""
        if not merged:
            d = self.fresh.var()
            out.append(stmt(d, op))
            return
        targets = tuple(self.fresh.var() for _ in merged)
        out.append(Stmt(targets, op))
        for u, t in zip(merged, targets):
            names[u] = t

    # -- statements ------------------------------------------------------------

    def lower_stmt(self, s, names: dict, out: list[Stmt]) -> None:
        if isinstance(s, SAssign):
            names[s.name] = self.lower_expr(s.expr, names, out)
        elif isinstance(s, SExpr):
            self.lower_expr(s.expr, names, out)
        elif isinstance(s, SPass):
            pass
        elif isinstance(s, SIf):
            self.lower_if(s, names, out)
        elif isinstance(s, SFor):
            self.lower_for(s, names, out)
        elif isinstance(s, SWhile):
            self.lower_while(s, names, out)
        elif isinstance(s, SReturn):
            self.fail(s.pos, "lowering", "return must be the final statement")
        else:
            raise AssertionError(f"unknown statement {s!r}")

    def _branch_block(self, stmts, merged: list[str], names: dict, pos: Pos) -> Block:
        body: list[Stmt] = []
        child = dict(names)
        for st in stmts:
            self.lower_stmt(st, child, body)
        ret = self._pack(merged, child, body, pos)
        if not body:  # blocks need at least the return binding
            v = self.fresh.var()
            body.append(stmt(v, MkTuple(())))
            ret = v if not merged else ret
        return Block(self.fresh.var(), Program(tuple(body), ret))

    def lower_if(self, s: SIf, names: dict, out: list[Stmt]) -> None:
        c = self.lower_expr(s.cond, names, out)
        ct = self.pure("truthy", [c], out)
        then_assigned = _assigned_in(s.then)
        else_assigned = _assigned_in(s.orelse)
        merged = sorted(then_assigned | else_assigned)
        for u in merged:
            if u in names:
                continue
            if u in then_assigned and u in else_assigned:
                continue
            self.fail(s.pos, "lowering",
                      f"{u!r} is assigned in only one branch and has no prior definition")
        then_blk = self._branch_block(s.then, merged, names, s.pos)
        else_blk = self._branch_block(s.orelse, merged, names, s.pos)
        self._bind_merged(merged, names, If(ct, then_blk, else_blk), out)

    def lower_for(self, s: SFor, names: dict, out: list[Stmt]) -> None:
        subj = self.lower_expr(s.subject, names, out)
        body_assigned = _assigned_in(s.body) | {s.var}
        carried = sorted(u for u in body_assigned
                         if u in names and names[u] is not _LOOP_DEAD)
        init = self._pack(carried, names, out, s.pos)

        param = self.fresh.var()
        body: list[Stmt] = []
        acc = self.fresh.var()
        body.append(stmt(acc, Proj(0, param)))
        item = self.fresh.var()
        body.append(stmt(item, Proj(1, param)))
        child = dict(names)
        self._unpack(carried, acc, child, body)
        child[s.var] = item
        for st in s.body:
            self.lower_stmt(st, child, body)
        # the empty accumulator threads through unchanged
        ret = acc if not carried else self._pack(carried, child, body, s.pos)
        blk = Block(param, Program(tuple(body), ret))
        self._bind_merged(carried, names, Fold(subj, init, blk), out)
        for u in body_assigned:
            if u not in carried:
                names[u] = _LOOP_DEAD

    def _unpack(self, carried: list[str], src: VarId, child: dict,
                body: list[Stmt]) -> None:
        if len(carried) == 1:
            child[carried[0]] = src
            return
        for i, u in enumerate(carried):
            v = self.fresh.var()
            body.append(stmt(v, Proj(i, src)))
            child[u] = v

    def lower_while(self, s: SWhile, names: dict, out: list[Stmt]) -> None:
        body_assigned = _assigned_in(s.body)
        carried = sorted(u for u in body_assigned
                         if u in names and names[u] is not _LOOP_DEAD)
        tt = self.fresh.var()
        out.append(stmt(tt, Prim(True)))
        ff = self.fresh.var()
        out.append(stmt(ff, Prim(False)))
        state0 = self.fresh.var()
        out.append(stmt(state0, MkTuple((tt,) + tuple(
            self.read(u, s.pos, names) for u in carried))))
        iters = self.fresh.var()
        out.append(stmt(iters, Prim([None] * self.loop_budget)))

        param = self.fresh.var()
        body: list[Stmt] = []
        state = self.fresh.var()
        body.append(stmt(state, Proj(0, param)))
        active = self.fresh.var()
        body.append(stmt(active, Proj(0, state)))
        child = dict(names)
        for i, u in enumerate(carried):
            v = self.fresh.var()
            body.append(stmt(v, Proj(i + 1, state)))
            child[u] = v

        # active branch: evaluate the condition, then either run the body
        # (keeping the flag up) or lower the flag and freeze the state
        active_body: list[Stmt] = []
        cond_names = dict(child)
        c = self.lower_expr(s.cond, cond_names, active_body)
        ct = self.pure("truthy", [c], active_body)

        run_body: list[Stmt] = []
        run_names = dict(cond_names)
        for st in s.body:
            self.lower_stmt(st, run_names, run_body)
        s_true = self.fresh.var()
        run_body.append(stmt(s_true, MkTuple((tt,) + tuple(
            self.read(u, s.pos, run_names) for u in carried))))
        run_blk = Block(self.fresh.var(), Program(tuple(run_body), s_true))

        stop_body: list[Stmt] = []
        s_false = self.fresh.var()
        stop_body.append(stmt(s_false, MkTuple((ff,) + tuple(
            self.read(u, s.pos, cond_names) for u in carried))))
        stop_blk = Block(self.fresh.var(), Program(tuple(stop_body), s_false))

        stepped = self.fresh.var()
        active_body.append(stmt(stepped, If(ct, run_blk, stop_blk)))
        active_blk = Block(self.fresh.var(),
                           Program(tuple(active_body), stepped))

        idle_body: list[Stmt] = [stmt(self.fresh.var(), MkTuple(()))]
        idle_blk = Block(self.fresh.var(), Program(tuple(idle_body), state))

        next_state = self.fresh.var()
        body.append(stmt(next_state, If(active, active_blk, idle_blk)))
        blk = Block(param, Program(tuple(body), next_state))

        final = self.fresh.var()
        out.append(stmt(final, Fold(iters, state0, blk)))
        act_end = self.fresh.var()
        out.append(stmt(act_end, Proj(0, final)))
        self.pure("while_budget", [act_end], out)
        for i, u in enumerate(carried):
            v = self.fresh.var()
            out.append(stmt(v, Proj(i + 1, final)))
            names[u] = v
        for u in body_assigned:
            if u not in carried:
                names[u] = _LOOP_DEAD

    # -- expressions -----------------------------------------------------------

    _BINOP_BUILTIN = {"==": "eq", "!=": "ne", "<": "lt", "<=": "le", ">": "gt",
                      ">=": "ge", "+": "add", "-": "sub", "*": "mul", "/": "div",
                      "//": "floordiv", "%": "mod"}
    _UNARY_BUILTIN = {"-": "neg", "+": "pos", "not": "not"}

    def lower_expr(self, e, names: dict, out: list[Stmt]) -> VarId:
        if isinstance(e, ELit):
            v = self.fresh.var()
            out.append(stmt(v, Prim(e.value)))
            return v
        if isinstance(e, EName):
            return self.read(e.name, e.pos, names)
        if isinstance(e, EList):
            items = [self.lower_expr(i, names, out) for i in e.items]
            return self.pure("list", items, out)
        if isinstance(e, ETuple):
            items = [self.lower_expr(i, names, out) for i in e.items]
            v = self.fresh.var()
            out.append(stmt(v, MkTuple(tuple(items))))
            return v
        if isinstance(e, EUnary):
            a = self.lower_expr(e.operand, names, out)
            return self.pure(self._UNARY_BUILTIN[e.op], [a], out)
        if isinstance(e, EBinary):
            a = self.lower_expr(e.left, names, out)
            b = self.lower_expr(e.right, names, out)
            if e.op == "in":
                return self.pure("in", [a, b], out)
            return self.pure(self._BINOP_BUILTIN[e.op], [a, b], out)
        if isinstance(e, EBoolOp):
            return self.lower_boolop(e, names, out)
        if isinstance(e, EIndex):
            recv = self.lower_expr(e.recv, names, out)
            idx = self.lower_expr(e.index, names, out)
            return self.pure("index", [recv, idx], out)
        if isinstance(e, ECall):
            args = [self.lower_expr(a, names, out) for a in e.args]
            if e.func in BUILTINS:
                return self.pure(e.func, args, out)
            return self.external(e.func, args, out)
        if isinstance(e, EMethod):
            recv = self.lower_expr(e.recv, names, out)
            args = [self.lower_expr(a, names, out) for a in e.args]
            return self.external("." + e.name, [recv] + args, out)
        raise AssertionError(f"unknown expression {e!r}")

    def lower_boolop(self, e: EBoolOp, names: dict, out: list[Stmt]) -> VarId:
        # Python returns the deciding operand itself, and only evaluates the
        # right side when needed; an If keeps both properties.
        a = self.lower_expr(e.left, names, out)
        ct = self.pure("truthy", [a], out)
        rhs_body: list[Stmt] = []
        rhs_names = dict(names)
        b = self.lower_expr(e.right, rhs_names, rhs_body)
        if not rhs_body:
            rhs_body.append(stmt(self.fresh.var(), MkTuple(())))
        rhs_blk = Block(self.fresh.var(), Program(tuple(rhs_body), b))
        lhs_body: list[Stmt] = [stmt(self.fresh.var(), MkTuple(()))]
        lhs_blk = Block(self.fresh.var(), Program(tuple(lhs_body), a))
        v = self.fresh.var()
        if e.op == "or":
            out.append(stmt(v, If(ct, lhs_blk, rhs_blk)))
        else:
            out.append(stmt(v, If(ct, rhs_blk, lhs_blk)))
        return v


def lower(module: SrcModule, ft: FuncTable, inputs: dict[str, Const] | None = None,
          loop_budget: int = DEFAULT_LOOP_BUDGET) -> Program:
    """Lower parsed source to a validating IR program."""
    return _Lowerer(ft, module.filename, loop_budget, dict(inputs or {})).lower_module(module)


def transpile(text: str, filename: str = "<src>", ft: FuncTable | None = None,
              inputs: dict[str, Const] | None = None,
              loop_budget: int = DEFAULT_LOOP_BUDGET) -> tuple[Program, FuncTable]:
    ft = ft if ft is not None else FuncTable()
    module = parse_source(text, filename)
    return lower(module, ft, inputs, loop_budget), ft


# ---------------------------------------------------------------------------
# reference interpreter (differential oracle)
# ---------------------------------------------------------------------------


class SourceEvalError(Exception):
    pass


class _ReturnSignal(Exception):
    def __init__(self, value):
        self.value = value


class _RefEval:
    def __init__(self, module: SrcModule, env: Environment,
                 inputs: dict[str, Const], loop_budget: int):
        self.module = module
        self.env = env
        self.loop_budget = loop_budget
        self.locals: dict[str, object] = dict(inputs)

    def fail(self, pos: Pos, message: str):
        raise SourceEvalError(
            _diag(self.module.filename, pos, "runtime", message))

    def run(self) -> Value:
        try:
            self.exec_block(self.module.body)
        except _ReturnSignal as r:
            return py_to_value(r.value)
        self.fail((1, 1), "program finished without a return")

    def exec_block(self, stmts) -> None:
        for s in stmts:
            self.exec_stmt(s)

    def exec_stmt(self, s) -> None:
        if isinstance(s, SAssign):
            self.locals[s.name] = self.eval(s.expr)
        elif isinstance(s, SExpr):
            self.eval(s.expr)
        elif isinstance(s, SPass):
            pass
        elif isinstance(s, SReturn):
            raise _ReturnSignal(self.eval(s.expr))
        elif isinstance(s, SIf):
            if self.eval(s.cond):
                self.exec_block(s.then)
            else:
                self.exec_block(s.orelse)
        elif isinstance(s, SFor):
            subject = self.eval(s.subject)
            if not isinstance(subject, (list, tuple)):
                self.fail(s.pos, f"cannot iterate over {type(subject).__name__}")
            for item in subject:
                self.locals[s.var] = item
                self.exec_block(s.body)
        elif isinstance(s, SWhile):
            evals = 0
            while True:
                if evals == self.loop_budget:
                    raise LoopBudgetError("loop exceeded its iteration budget")
                evals += 1
                if not self.eval(s.cond):
                    break
                self.exec_block(s.body)
        else:
            raise AssertionError(f"unknown statement {s!r}")

    def eval(self, e):
        if isinstance(e, ELit):
            return e.value
        if isinstance(e, EName):
            if e.name not in self.locals:
                self.fail(e.pos, f"undefined variable {e.name!r}")
            return self.locals[e.name]
        if isinstance(e, EList):
            return [self.eval(i) for i in e.items]
        if isinstance(e, ETuple):
            return tuple(self.eval(i) for i in e.items)
        if isinstance(e, EUnary):
            if e.op == "not":
                return not self.eval(e.operand)
            return eval_builtin({"-": "neg", "+": "pos"}[e.op], (self.eval(e.operand),))
        if isinstance(e, EBinary):
            a = self.eval(e.left)
            b = self.eval(e.right)
            name = _Lowerer._BINOP_BUILTIN.get(e.op, "in" if e.op == "in" else None)
            if name is None:
                raise AssertionError(e.op)
            try:
                return eval_builtin(name, (a, b))
            except LoopBudgetError:
                raise
            except Exception as exc:
                self.fail(e.pos, f"{e.op}: {exc}")
        if isinstance(e, EBoolOp):
            a = self.eval(e.left)
            if e.op == "or":
                return a if a else self.eval(e.right)
            return self.eval(e.right) if a else a
        if isinstance(e, EIndex):
            recv = self.eval(e.recv)
            idx = self.eval(e.index)
            try:
                return eval_builtin("index", (recv, idx))
            except Exception as exc:
                self.fail(e.pos, f"index: {exc}")
        if isinstance(e, ECall):
            args = tuple(self.eval(a) for a in e.args)
            if e.func in BUILTINS:
                try:
                    return eval_builtin(e.func, args)
                except LoopBudgetError:
                    raise
                except Exception as exc:
                    self.fail(e.pos, f"{e.func}: {exc}")
            return self.call_env(e.func, args, e.pos)
        if isinstance(e, EMethod):
            recv = self.eval(e.recv)
            args = (recv,) + tuple(self.eval(a) for a in e.args)
            return self.call_env("." + e.name, args, e.pos)
        raise AssertionError(f"unknown expression {e!r}")

    def call_env(self, fn: str, args: tuple, pos: Pos):
        res = self.env.call(fn, py_to_value(args))
        if not isinstance(res.result, (Leaf, Tup)):
            self.fail(pos, f"{fn} returned a set-valued result under sequential evaluation")
        return value_to_py(res.result)


def reference_eval(module: SrcModule, env: Environment,
                   inputs: dict[str, Const] | None = None,
                   loop_budget: int = DEFAULT_LOOP_BUDGET) -> Value:
    """Sequential source-order evaluation; the differential-testing oracle."""
    return _RefEval(module, env, dict(inputs or {}), loop_budget).run()
