"""Random program generators and a random-order execution driver.

Three generators share this module: gen_program builds concrete IR
programs for confluence and scheduling tests, source_corpus instantiates
restricted-subset source templates for differential testing, and
gen_abstract_case builds small set-valued programs together with the
enumeration of their concrete realizations.
"""

from __future__ import annotations

import hashlib
import itertools
import random
from dataclasses import dataclass

from termflow.builtins import register_builtins
from termflow.conformal import (
    ConformalConfig,
    ScoredOutput,
    abstract_classify,
    abstract_detect,
    concretize,
)
from termflow.ir import (
    Block,
    Call,
    Fold,
    Fresh,
    FuncTable,
    If,
    Leaf,
    MkTuple,
    Prim,
    Program,
    Proj,
    Tup,
    op_blocks,
    rename_vars,
    serialize,
    stmt,
    validate,
    value_canonical,
)
from termflow.rewrite import (
    RewriteContext,
    applicable,
    apply,
    find_dispatchable,
    mark_pending,
    pending_site,
    substitute_result,
    terminal_value,
)
from termflow.toolsenv import EnvError, EnvResult, ScoredCall

WORDS = ("cat", "dog", "cup", "box", "sky", "car")


def alpha_key(p: Program, ft: FuncTable) -> str:
    """Serialization with variables renumbered in binding order, so terminal
    programs that differ only in fresh-name choices compare equal."""
    order: dict[int, int] = {}

    def walk(prog: Program) -> None:
        for s in prog.stmts:
            for t in s.targets:
                order.setdefault(t, len(order))
            for blk in op_blocks(s.op):
                order.setdefault(blk.param, len(order))
                walk(blk.body)

    walk(p)
    return serialize(rename_vars(p, order), ft)


# ---------------------------------------------------------------------------
# deterministic stub environment
# ---------------------------------------------------------------------------


class StubEnv:
    """Hash-seeded environment: equal (seed, fn, argument) always answers
    the same, so call results are independent of execution order."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _rng(self, fn: str, arg) -> random.Random:
        text = f"{self.seed}|{fn}|{value_canonical(arg)}"
        digest = hashlib.sha256(text.encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def call(self, fn: str, arg) -> EnvResult:
        rng = self._rng(fn, arg)
        latency = rng.uniform(10.0, 100.0)
        if fn == ".q_int":
            result = Leaf(rng.randrange(-9, 10))
        elif fn == ".q_bool":
            result = Leaf(rng.random() < 0.5)
        elif fn == ".q_str":
            result = Leaf(rng.choice(WORDS))
        elif fn == ".q_list":
            result = Leaf([rng.randrange(0, 9) for _ in range(rng.randrange(2, 5))])
        else:
            raise EnvError(f"stub has no function {fn!r}")
        return EnvResult(result, latency)


EFFECT_KINDS = {"int": ".q_int", "bool": ".q_bool", "str": ".q_str", "list": ".q_list"}


def base_table():
    """FuncTable with builtins plus the stub externals; returns
    (table, builtin name->decl, external kind->decl)."""
    ft = FuncTable()
    builtins = register_builtins(ft)
    externals = {kind: ft.register(name, pure=False, arity=None)
                 for kind, name in EFFECT_KINDS.items()}
    return ft, builtins, externals


# ---------------------------------------------------------------------------
# random concrete IR programs
# ---------------------------------------------------------------------------


def _rand_const(rng: random.Random, kind: str):
    if kind == "int":
        return rng.randrange(-9, 10)
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "str":
        return rng.choice(WORDS)
    if kind == "list":
        return [rng.randrange(0, 9) for _ in range(rng.randrange(2, 5))]
    raise AssertionError(kind)


class _Builder:
    def __init__(self, rng: random.Random, effects: bool):
        self.rng = rng
        self.effects = effects
        self.ft, self.builtins, self.externals = base_table()
        self.fresh = Fresh(0)
        self.n_effects = 0

    def pure(self, stmts, scope, name: str, args: tuple[int, ...], kind: str) -> int:
        arg = args[0]
        if len(args) != 1:
            arg = self.bind(stmts, scope, "_", MkTuple(args))
        return self.bind(stmts, scope, kind, Call(self.builtins[name].func_id, arg))

    def bind(self, stmts, scope, kind: str, op) -> int:
        v = self.fresh.var()
        stmts.append(stmt(v, op))
        scope.setdefault(kind, []).append(v)
        return v

    def var_of(self, stmts, scope, kind: str) -> int:
        have = scope.get(kind)
        if have and self.rng.random() < 0.8:
            return self.rng.choice(have)
        return self.bind(stmts, scope, kind, Prim(_rand_const(self.rng, kind)))

    def emit(self, stmts, scope, depth: int) -> None:
        rng = self.rng
        choices = ["prim", "arith", "cmp", "bool", "tuple"]
        if depth > 0:
            choices += ["if", "fold"]
        if self.effects and self.n_effects < 5:
            choices += ["call", "call"]
        kind = rng.choice(choices)
        if kind == "prim":
            k = rng.choice(("int", "bool", "str", "list"))
            self.bind(stmts, scope, k, Prim(_rand_const(rng, k)))
        elif kind == "arith":
            a = self.var_of(stmts, scope, "int")
            b = self.var_of(stmts, scope, "int")
            self.pure(stmts, scope, rng.choice(("add", "sub", "mul")), (a, b), "int")
        elif kind == "cmp":
            a = self.var_of(stmts, scope, "int")
            b = self.var_of(stmts, scope, "int")
            self.pure(stmts, scope, rng.choice(("eq", "ne", "lt", "le", "gt", "ge")),
                      (a, b), "bool")
        elif kind == "bool":
            a = self.var_of(stmts, scope, "bool")
            self.pure(stmts, scope, "not", (a,), "bool")
        elif kind == "tuple":
            a = self.var_of(stmts, scope, "int")
            b = self.var_of(stmts, scope, rng.choice(("int", "str")))
            t = self.bind(stmts, scope, "_", MkTuple((a, b)))
            self.bind(stmts, scope, "int", Proj(0, t))
        elif kind == "if":
            cond = self.var_of(stmts, scope, "bool")
            out = rng.choice(("int", "str"))
            blocks = [self.block(scope, depth - 1, out) for _ in range(2)]
            self.bind(stmts, scope, out, If(cond, blocks[0], blocks[1]))
        elif kind == "fold":
            if scope.get("list") and rng.random() < 0.5:
                subject = rng.choice(scope["list"])
            else:
                subject = self.bind(stmts, scope, "list",
                                    Prim(_rand_const(rng, "list")))
            init = self.var_of(stmts, scope, "int")
            self.bind(stmts, scope, "int", Fold(subject, init, self.fold_body(depth)))
        elif kind == "call":
            self.n_effects += 1
            out = rng.choice(("int", "bool", "str", "list"))
            arg = self.var_of(stmts, scope, rng.choice(("int", "str")))
            decl = self.externals[out]
            self.bind(stmts, scope, out, Call(decl.func_id, arg))
        else:
            raise AssertionError(kind)

    def block(self, outer_scope, depth: int, out_kind: str) -> Block:
        param = self.fresh.var()
        stmts: list = []
        scope = {k: list(v) for k, v in outer_scope.items()}
        for _ in range(self.rng.randrange(1, 3)):
            self.emit(stmts, scope, depth)
        ret = self.var_of(stmts, scope, out_kind)
        return Block(param, Program(tuple(stmts), ret))

    def fold_body(self, depth: int) -> Block:
        param = self.fresh.var()
        stmts: list = []
        scope: dict[str, list[int]] = {}
        acc = self.bind(stmts, scope, "int", Proj(0, param))
        item = self.bind(stmts, scope, "int", Proj(1, param))
        if self.effects and depth > 1 and self.rng.random() < 0.3 and self.n_effects < 5:
            self.n_effects += 1
            item = self.bind(stmts, scope, "int",
                             Call(self.externals["int"].func_id, item))
        ret = self.fresh.var()
        stmts.append(stmt(ret, Call(self.builtins["add"].func_id,
                                    self.bind(stmts, scope, "_", MkTuple((acc, item))))))
        return Block(param, Program(tuple(stmts), ret))


def gen_program(rng: random.Random, effects: bool = True) -> tuple[Program, FuncTable]:
    b = _Builder(rng, effects)
    stmts: list = []
    scope: dict[str, list[int]] = {}
    for _ in range(rng.randrange(4, 9)):
        b.emit(stmts, scope, depth=2)
    if effects and b.n_effects == 0:
        arg = b.var_of(stmts, scope, "int")
        b.bind(stmts, scope, "int", Call(b.externals["int"].func_id, arg))
    ret = b.var_of(stmts, scope, rng.choice(("int", "bool", "str")))
    p = Program(tuple(stmts), ret)
    diags = validate(p, b.ft)
    assert not diags, f"generator produced an invalid program: {diags}"
    return p, b.ft


# ---------------------------------------------------------------------------
# random-order execution
# ---------------------------------------------------------------------------


def run_random(p: Program, ft: FuncTable, env, rng: random.Random,
               mode: str = "concrete", max_actions: int = 100_000):
    """Drive a program with rule applications, dispatches, and completions
    interleaved in random order.  Returns (terminal value, sorted effect
    list, terminal program)."""
    ctx = RewriteContext(p, ft, mode=mode)
    tasks = itertools.count(1)
    in_flight: dict[int, EnvResult] = {}
    effects: list[tuple[str, str]] = []
    for _ in range(max_actions):
        acts: list[tuple[str, object]] = [("rule", ri) for ri in applicable(ctx)]
        acts += [("dispatch", d) for d in find_dispatchable(ctx)]
        acts += [("complete", t) for t in in_flight]
        if not acts:
            break
        what, x = acts[rng.randrange(len(acts))]
        if what == "rule":
            apply(ctx, x)
        elif what == "dispatch":
            task = next(tasks)
            name = ft.get(x.func).name
            effects.append((name, value_canonical(x.arg)))
            in_flight[task] = env.call(name, x.arg)
            mark_pending(ctx, x.site, task)
        else:
            res = in_flight.pop(x)
            site = pending_site(ctx, x)
            assert site is not None
            substitute_result(ctx, site, res.result)
    else:
        raise AssertionError("random-order run did not terminate")
    return terminal_value(ctx), sorted(effects), ctx.program


# ---------------------------------------------------------------------------
# source-program corpus
# ---------------------------------------------------------------------------


def _t_arith_chain(rng):
    a, b, c = rng.randrange(1, 9), rng.randrange(1, 9), rng.randrange(1, 9)
    return (f"a = {a}\n"
            f"b = a * {b} + {c}\n"
            f"c = b // 2 - a\n"
            f"d = c % 7\n"
            f"return d * b\n")

def _t_call_then_math(rng):
    n = rng.randrange(0, 40)
    return (f"doc = \"{rng.choice(WORDS)}\"\n"
            f"x = doc.q_int({n})\n"
            f"y = x * {rng.randrange(2, 5)} + {rng.randrange(0, 9)}\n"
            f"return y\n")

def _t_if_else_merge(rng):
    return (f"doc = \"{rng.choice(WORDS)}\"\n"
            f"flag = doc.q_bool({rng.randrange(0, 30)})\n"
            f"y = {rng.randrange(0, 5)}\n"
            f"if flag:\n"
            f"    y = y + {rng.randrange(1, 9)}\n"
            f"else:\n"
            f"    y = y - {rng.randrange(1, 9)}\n"
            f"return y\n")

def _t_if_only_then(rng):
    k = rng.randrange(2, 9)
    return (f"x = {rng.randrange(0, 12)}\n"
            f"y = 1\n"
            f"if x > {k}:\n"
            f"    y = x * 2\n"
            f"return y + x\n")

def _t_nested_if(rng):
    a, b = rng.randrange(0, 10), rng.randrange(0, 10)
    return (f"x = {a}\n"
            f"y = {b}\n"
            f"r = 0\n"
            f"if x > 3:\n"
            f"    if y > 4:\n"
            f"        r = x + y\n"
            f"    else:\n"
            f"        r = x - y\n"
            f"else:\n"
            f"    r = y\n"
            f"return r\n")

def _t_for_literal_sum(rng):
    items = ", ".join(str(rng.randrange(0, 9)) for _ in range(rng.randrange(3, 6)))
    return (f"total = 0\n"
            f"for v in [{items}]:\n"
            f"    total = total + v * {rng.randrange(1, 4)}\n"
            f"return total\n")

def _t_for_with_call(rng):
    items = ", ".join(str(rng.randrange(0, 20)) for _ in range(3))
    return (f"doc = \"{rng.choice(WORDS)}\"\n"
            f"total = 0\n"
            f"for v in [{items}]:\n"
            f"    total = total + doc.q_int(v)\n"
            f"return total\n")

def _t_for_if_filter(rng):
    items = ", ".join(str(rng.randrange(0, 9)) for _ in range(5))
    k = rng.randrange(2, 7)
    return (f"count = 0\n"
            f"for v in [{items}]:\n"
            f"    if v > {k}:\n"
            f"        count = count + 1\n"
            f"return count\n")

def _t_while_countdown(rng):
    n = rng.randrange(3, 9)
    return (f"n = {n}\n"
            f"acc = 0\n"
            f"while n > 0:\n"
            f"    acc = acc + n * n\n"
            f"    n = n - 1\n"
            f"return acc\n")

def _t_while_collatz(rng):
    n = rng.randrange(2, 27)
    return (f"n = {n}\n"
            f"steps = 0\n"
            f"while n > 1:\n"
            f"    if n % 2 == 0:\n"
            f"        n = n // 2\n"
            f"    else:\n"
            f"        n = 3 * n + 1\n"
            f"    steps = steps + 1\n"
            f"return steps\n")

def _t_bool_ops(rng):
    return (f"doc = \"{rng.choice(WORDS)}\"\n"
            f"x = {rng.randrange(0, 9)}\n"
            f"a = x > {rng.randrange(0, 9)} and x < {rng.randrange(5, 14)}\n"
            f"b = a or doc.q_bool(x)\n"
            f"r = 0\n"
            f"if b:\n"
            f"    r = 1\n"
            f"return r\n")

def _t_list_ops(rng):
    probe = rng.randrange(0, 9)
    return (f"doc = \"{rng.choice(WORDS)}\"\n"
            f"xs = doc.q_list({rng.randrange(0, 25)})\n"
            f"n = len(xs)\n"
            f"total = 0\n"
            f"for v in xs:\n"
            f"    total = total + v\n"
            f"has = {probe} in xs\n"
            f"if has:\n"
            f"    total = total + 100\n"
            f"return total + n + xs[0]\n")

def _t_strings(rng):
    a, b = rng.randrange(0, 15), rng.randrange(0, 15)
    return (f"doc = \"{rng.choice(WORDS)}\"\n"
            f"s = doc.q_str({a})\n"
            f"t = doc.q_str({b})\n"
            f"r = \"same\"\n"
            f"if s != t:\n"
            f"    r = s\n"
            f"return r\n")

def _t_tuple_index(rng):
    a, b = rng.randrange(0, 9), rng.randrange(0, 9)
    return (f"t = ({a}, {b} * 2)\n"
            f"u = (t[1], t[0])\n"
            f"return u[0] + u[1] * 10\n")

def _t_while_with_call(rng):
    return (f"doc = \"{rng.choice(WORDS)}\"\n"
            f"n = {rng.randrange(2, 5)}\n"
            f"acc = 0\n"
            f"while n > 0:\n"
            f"    acc = acc + doc.q_int(n + {rng.randrange(0, 50)})\n"
            f"    n = n - 1\n"
            f"return acc\n")

SOURCE_TEMPLATES = [
    _t_arith_chain, _t_call_then_math, _t_if_else_merge, _t_if_only_then,
    _t_nested_if, _t_for_literal_sum, _t_for_with_call, _t_for_if_filter,
    _t_while_countdown, _t_while_collatz, _t_bool_ops, _t_list_ops,
    _t_strings, _t_tuple_index, _t_while_with_call,
]


def source_corpus(per_template: int = 4) -> list[tuple[str, str]]:
    """Deterministic corpus of (name, source text), >= 50 programs."""
    corpus = []
    for template in SOURCE_TEMPLATES:
        for i in range(per_template):
            rng = random.Random(f"{template.__name__}|{i}")
            corpus.append((f"{template.__name__[3:]}_{i}", template(rng)))
    return corpus


# ---------------------------------------------------------------------------
# abstract programs with enumerable realizations
# ---------------------------------------------------------------------------

LABELS = ("red", "blue", "green", "gold")


@dataclass
class AbstractCase:
    program: Program
    ft: FuncTable
    cfg: ConformalConfig
    presets: dict[str, ScoredCall]          # arg tag -> scored output
    realizations: dict[str, list]           # arg tag -> concrete Leaf values


class PresetScoredEnv:
    """Scored environment serving preset candidate lists keyed by the
    call's (sole, string) argument."""

    def __init__(self, presets: dict[str, ScoredCall]):
        self.presets = presets

    def scored(self, fn: str, arg) -> ScoredCall:
        key = value_canonical(arg)
        if key not in self.presets:
            raise EnvError(f"no preset for {fn} {key}")
        return self.presets[key]

    def call(self, fn: str, arg) -> EnvResult:
        raise EnvError("preset environment only serves scored calls")


class ChoiceEnv:
    """Concrete environment pinning each abstract call site to one of its
    realizations."""

    def __init__(self, choices: dict[str, Leaf]):
        self.choices = choices

    def call(self, fn: str, arg) -> EnvResult:
        key = value_canonical(arg)
        if key not in self.choices:
            raise EnvError(f"no choice for {fn} {key}")
        return EnvResult(self.choices[key], 10.0)


def _gen_classify_leaf(rng: random.Random, card: int) -> ScoredCall:
    chosen = rng.sample(LABELS, k=card)
    cands = [(label, round(rng.uniform(0.55, 0.95), 3)) for label in chosen]
    for label in set(LABELS) - set(chosen):
        cands.append((label, round(rng.uniform(0.01, 0.4), 3)))
    rng.shuffle(cands)
    return ScoredCall("classify", tuple(cands), None, 10.0)


def _gen_detect_leaf(rng: random.Random, uncertain: int) -> ScoredCall:
    n_certain = rng.randrange(1, 3)
    cands = [(f"tok{i}", round(rng.uniform(0.9, 0.99), 3)) for i in range(n_certain)]
    for i in range(uncertain):
        cands.append((f"unc{i}", round(rng.uniform(0.55, 0.85), 3)))
    cands.append(("junk", round(rng.uniform(0.01, 0.3), 3)))
    return ScoredCall("detect", tuple(cands), None, 10.0)


def gen_abstract_case(rng: random.Random) -> AbstractCase:
    """A program whose only set-valued inputs are <=3 abstract leaves of
    cardinality <=3, combined through pure ops, ifs, and folds."""
    cfg = ConformalConfig({"ab_classify": 0.5, "ab_detect": 0.5},
                          (1.0,), 1.0, 0.1)
    ft = FuncTable()
    builtins = register_builtins(ft)
    f_classify = ft.register(".ab_classify", pure=False, arity=None)
    f_detect = ft.register(".ab_detect", pure=False, arity=None)

    fresh = Fresh(0)
    stmts: list = []
    presets: dict[str, ScoredCall] = {}
    realizations: dict[str, list] = {}
    label_vars: list[int] = []
    int_vars: list[int] = []
    list_vars: list[int] = []
    card: dict[int, int] = {}  # upper bound on a var's set cardinality

    def bind(op) -> int:
        v = fresh.var()
        stmts.append(stmt(v, op))
        return v

    def as_values(options) -> list:
        return [o if isinstance(o, (Leaf, Tup)) else Leaf(o) for o in options]

    n_leaves = rng.randrange(1, 4)
    for i in range(n_leaves):
        tag = f"site{i}"
        key = value_canonical(Leaf(tag))
        tag_var = bind(Prim(tag))
        if rng.random() < 0.6:
            sc = _gen_classify_leaf(rng, rng.randrange(2, 4))
            presets[key] = sc
            av = abstract_classify(ScoredOutput(sc.candidates), "ab_classify", cfg)
            realizations[key] = as_values(concretize(av, 64))
            v = bind(Call(f_classify.func_id, tag_var))
            card[v] = len(realizations[key])
            label_vars.append(v)
        else:
            sc = _gen_detect_leaf(rng, uncertain=rng.randrange(0, 2))
            presets[key] = sc
            av = abstract_detect(ScoredOutput(sc.candidates), cfg, "ab_detect")
            realizations[key] = as_values(concretize(av, 64))
            v = bind(Call(f_detect.func_id, tag_var))
            card[v] = len(realizations[key])
            list_vars.append(v)

    def pure(name: str, *args: int) -> int:
        arg = args[0] if len(args) == 1 else bind(MkTuple(args))
        return bind(Call(builtins[name].func_id, arg))

    # count the detected items: exercises fold over abstract lists
    one = None
    for lv in list_vars:
        if one is None:
            one = bind(Prim(1))
        zero = bind(Prim(0))
        param = fresh.var()
        acc = fresh.var()
        inc = fresh.var()
        t = fresh.var()
        body = Block(param, Program((
            stmt(acc, Proj(0, param)),
            stmt(t, MkTuple((acc, one))),
            stmt(inc, Call(builtins["add"].func_id, t)),
        ), inc))
        v = bind(Fold(lv, zero, body))
        card[v] = card[lv]
        int_vars.append(v)

    for lv in label_vars:
        probe = bind(Prim(rng.choice(LABELS)))
        cond = pure("eq", lv, probe)
        k = rng.choice(("int", "label"))
        def branch(value) -> Block:
            param = fresh.var()
            out = fresh.var()
            return Block(param, Program((stmt(out, Prim(value)),), out))
        if k == "int" or not label_vars:
            v = bind(If(cond, branch(rng.randrange(0, 9)), branch(rng.randrange(10, 19))))
            card[v] = 2
            int_vars.append(v)
        else:
            v = bind(If(cond, branch(rng.choice(LABELS)), branch(rng.choice(WORDS))))

    # pointwise products bloat set cardinality; stay under the engine's cap
    while len(int_vars) >= 2 and rng.random() < 0.6:
        pairs = [(a, b) for a, b in itertools.combinations(int_vars, 2)
                 if card[a] * card[b] <= 64]
        if not pairs:
            break
        a, b = pairs[rng.randrange(len(pairs))]
        v = pure(rng.choice(("add", "mul")), a, b)
        card[v] = card[a] * card[b]
        int_vars.append(v)

    pool = int_vars or label_vars or list_vars
    ret = rng.choice(pool)
    p = Program(tuple(stmts), ret)
    diags = validate(p, ft)
    assert not diags, f"abstract generator produced an invalid program: {diags}"
    return AbstractCase(p, ft, cfg, presets, realizations)


def enumerate_choice_envs(case: AbstractCase):
    """Yield a ChoiceEnv per concrete realization of every abstract leaf."""
    keys = sorted(case.realizations)
    for combo in itertools.product(*(case.realizations[k] for k in keys)):
        yield ChoiceEnv(dict(zip(keys, combo)))
