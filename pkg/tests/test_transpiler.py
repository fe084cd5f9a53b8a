"""Source front end: parsing, diagnostics, lowering, reference parity."""

import pytest

import gen
from termflow.builtins import LoopBudgetError
from termflow.ir import Leaf, value_key
from termflow.runtime import Failed, Result, run
from termflow.toolsenv import InstrumentedEnv
from termflow.transpiler import (
    SourceError,
    parse_source,
    reference_eval,
    transpile,
)


def lowered_value(text, seed=0, inputs=None, loop_budget=1000):
    p, ft = transpile(text, "t.py", inputs=inputs, loop_budget=loop_budget)
    out = run(p, ft, gen.StubEnv(seed))
    assert isinstance(out, Result), out
    return out.value


def ref_value(text, seed=0, inputs=None, loop_budget=1000):
    module = parse_source(text, "t.py")
    return reference_eval(module, gen.StubEnv(seed), inputs, loop_budget)


def both_agree(text, seed=0, **kw):
    got = lowered_value(text, seed, **kw)
    want = ref_value(text, seed, **kw)
    assert value_key(got) == value_key(want), (got, want)
    return got


# ---------------------------------------------------------------------------
# parse errors
# ---------------------------------------------------------------------------


def err(text):
    with pytest.raises(SourceError) as e:
        parse_source(text, "bad.py")
    return str(e.value)


def test_rejects_string_prefixes():
    assert "prefix" in err('x = f"{1}"\nreturn x\n')
    assert "prefix" in err('x = b"raw"\nreturn x\n')


def test_rejects_lambda():
    msg = err("x = lambda: 1\nreturn x\n")
    assert "lambda" in msg


def test_rejects_import():
    assert "import" in err("import os\nreturn 1\n")


def test_rejects_break_and_continue():
    assert "break" in err("while 1 > 0:\n    break\nreturn 1\n")
    assert "continue" in err("for x in [1]:\n    continue\nreturn 1\n")


def test_rejects_return_inside_loop():
    msg = err("for x in [1, 2]:\n    return x\nreturn 0\n")
    assert "loop" in msg


def test_rejects_chained_comparison():
    assert "compar" in err("x = 1 < 2 < 3\nreturn x\n")


def test_rejects_keyword_arguments():
    assert err('x = doc.q(n=1)\nreturn x\n')


def test_numeric_literal_bases():
    assert both_agree("x = 0xFF + 0b101 + 0o17\nreturn x\n") == Leaf(275)


def test_rejects_unterminated_paren():
    msg = err("x = (\nreturn x\n")
    assert "bad.py" in msg


def test_diagnostics_carry_position():
    with pytest.raises(SourceError) as e:
        parse_source("x = 1\ny = x +\nreturn y\n", "pos.py")
    assert "pos.py:2:" in str(e.value)


def test_elif_chains_parse():
    text = ("x = 3\nr = 0\n"
            "if x == 1:\n    r = 1\n"
            "elif x == 2:\n    r = 2\n"
            "elif x == 3:\n    r = 3\n"
            "else:\n    r = 4\n"
            "return r\n")
    assert both_agree(text) == Leaf(3)


def test_single_line_suites():
    assert both_agree("x = 5\nif x > 2: x = x * 2\nreturn x\n") == Leaf(10)


# ---------------------------------------------------------------------------
# lowering errors
# ---------------------------------------------------------------------------


def test_branch_only_assignment_needs_prior_definition():
    text = "x = 1\nif x > 0:\n    y = 2\nreturn y\n"
    with pytest.raises(SourceError) as e:
        transpile(text, "t.py")
    assert "y" in str(e.value)


def test_loop_var_unusable_after_loop_without_priming():
    text = "for v in [1, 2]:\n    x = v\nreturn v\n"
    with pytest.raises(SourceError):
        transpile(text, "t.py")


def test_loop_var_usable_when_predefined():
    text = "v = 0\nfor v in [1, 2, 3]:\n    v = v\nreturn v\n"
    assert both_agree(text) == Leaf(3)


def test_return_must_be_last():
    with pytest.raises(SourceError):
        transpile("return 1\nx = 2\n", "t.py")


def test_missing_return():
    with pytest.raises(SourceError):
        transpile("x = 1\n", "t.py")


def test_undefined_variable():
    with pytest.raises(SourceError) as e:
        transpile("return nope\n", "t.py")
    assert "nope" in str(e.value)


def test_inputs_are_prebound():
    p, ft = transpile("return a + b\n", "t.py", inputs={"b": 2, "a": 40})
    out = run(p, ft, gen.StubEnv())
    assert isinstance(out, Result) and out.value == Leaf(42)


# ---------------------------------------------------------------------------
# semantics parity
# ---------------------------------------------------------------------------


def test_boolop_returns_operand_not_bool():
    assert both_agree('x = 0\ny = x or "fallback"\nreturn y\n') == Leaf("fallback")
    assert both_agree("x = 3\ny = x and 7\nreturn y\n") == Leaf(7)


def test_or_short_circuit_skips_effect():
    text = ('doc = "d"\nx = 1\n'
            "y = x > 0 or doc.q_bool(1)\n"
            "return y\n")
    env = InstrumentedEnv(gen.StubEnv())
    p, ft = transpile(text, "t.py")
    out = run(p, ft, env)
    assert isinstance(out, Result) and out.value == Leaf(True)
    assert env.calls == []  # rhs never evaluated


def test_and_short_circuit_runs_effect_when_needed():
    text = ('doc = "d"\nx = 1\n'
            "y = x > 0 and doc.q_bool(1)\n"
            "return y\n")
    env = InstrumentedEnv(gen.StubEnv())
    p, ft = transpile(text, "t.py")
    out = run(p, ft, env)
    assert isinstance(out, Result)
    assert len(env.calls) == 1


def test_not_in_membership():
    assert both_agree("xs = [1, 2, 3]\nr = 5 not in xs\nreturn r\n") == Leaf(True)


def test_nested_loops_with_conditionals():
    text = ("total = 0\n"
            "for a in [1, 2, 3]:\n"
            "    for b in [10, 20]:\n"
            "        if a * b > 25:\n"
            "            total = total + a * b\n"
            "return total\n")
    both_agree(text)


def test_while_budget_parity():
    text = "n = 0\nwhile n < 50:\n    n = n + 1\nreturn n\n"
    # generous budget: both succeed
    assert both_agree(text, loop_budget=200) == Leaf(50)
    # tight budget: reference raises, engine reports failure
    with pytest.raises(LoopBudgetError):
        ref_value(text, loop_budget=10)
    p, ft = transpile(text, "t.py", loop_budget=10)
    out = run(p, ft, gen.StubEnv())
    assert isinstance(out, Failed) and "budget" in out.error


def test_while_budget_boundary_exact():
    # loop finishing exactly at the budget must succeed on both sides
    text = "n = 0\nwhile n < 5:\n    n = n + 1\nreturn n\n"
    # 6 condition evaluations for 5 iterations
    assert both_agree(text, loop_budget=6) == Leaf(5)
    with pytest.raises(LoopBudgetError):
        ref_value(text, loop_budget=5)


def test_division_semantics_match():
    both_agree("a = 7\nb = -2\nreturn (a // b, a % b)\n")


def test_effect_multisets_match_reference():
    text = ('doc = "d"\n'
            "total = 0\n"
            "for v in [1, 2, 3]:\n"
            "    total = total + doc.q_int(v)\n"
            "return total\n")
    renv = InstrumentedEnv(gen.StubEnv(4))
    ref = reference_eval(parse_source(text, "t.py"), renv)
    eenv = InstrumentedEnv(gen.StubEnv(4))
    p, ft = transpile(text, "t.py")
    out = run(p, ft, eenv)
    assert isinstance(out, Result)
    assert value_key(out.value) == value_key(ref)
    assert sorted(renv.calls) == sorted(eenv.calls)


def test_corpus_covers_required_shapes():
    names = [name for name, _ in gen.source_corpus()]
    assert len(names) >= 50
    for needle in ("if_else_merge", "for_literal_sum", "while_countdown", "nested_if"):
        assert any(needle in n for n in names)
