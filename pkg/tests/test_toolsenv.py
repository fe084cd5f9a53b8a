"""Environments: mock determinism, fixtures, record/replay."""

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from termflow.ir import Leaf, Tup, py_to_value, value_canonical
from termflow.toolsenv import (
    EnvError,
    ExternalCallRecord,
    FixtureEnv,
    InstrumentedEnv,
    MockEnv,
    RecordingEnv,
    ReplayEnv,
    ReplayMiss,
    concrete_result,
    load_log,
    mock_env,
    save_log,
    value_from_json,
    value_json,
)

ARG = py_to_value(("img0", "widget"))


def test_mock_env_is_deterministic():
    a = mock_env(7).call(".find", ARG)
    b = mock_env(7).call(".find", ARG)
    assert a == b


def test_mock_env_seed_changes_results():
    outs = {value_canonical(mock_env(s).call(".llm_query", Leaf("q")).result)
            for s in range(8)}
    assert len(outs) > 1


def test_mock_find_scores_are_valid():
    sc = mock_env(3).scored(".find", ARG)
    assert sc.kind == "detect"
    assert all(0.0 < s < 1.0 for _, s in sc.candidates)
    tokens = [t for t, _ in sc.candidates]
    assert len(set(tokens)) == len(tokens)


def test_concrete_result_thresholds_detection():
    sc = mock_env(3).scored(".find", ARG)
    kept = concrete_result(sc)
    expect = [t for t, s in sc.candidates if s >= 0.5]
    assert kept == Leaf(expect)


def test_mock_simple_query_is_yes_or_no():
    arg = py_to_value(("p0", "Is it red?"))
    assert mock_env(1).call(".simple_query", arg).result.c in ("yes", "no")


def test_mock_rejects_unknown_function():
    with pytest.raises(EnvError):
        mock_env(0).call(".launch", Leaf(1))


def test_fixture_fifo_and_final_repeat():
    env = FixtureEnv({"responses": [
        {"fn": ".q", "arg": [1], "result": "first"},
        {"fn": ".q", "arg": [1], "result": "second"},
    ]})
    arg = Tup((Leaf(1),))
    got = [env.call(".q", arg).result.c for _ in range(4)]
    assert got == ["first", "second", "second", "second"]


def test_fixture_misses_raise():
    env = FixtureEnv({"responses": []})
    with pytest.raises(EnvError):
        env.call(".q", Leaf(1))


def test_fixture_tuple_wrapper():
    env = FixtureEnv({"responses": [
        {"fn": ".q", "arg": [1], "result": {"tuple": [1, "a"]}},
    ]})
    assert env.call(".q", Tup((Leaf(1),))).result == py_to_value((1, "a"))


def test_fixture_latency_default_and_override():
    env = FixtureEnv({"default_latency_ms": 30.0, "responses": [
        {"fn": ".a", "arg": [], "result": 1},
        {"fn": ".b", "arg": [], "result": 2, "latency_ms": 75.0},
    ]})
    assert env.call(".a", Tup(())).latency_ms == 30.0
    assert env.call(".b", Tup(())).latency_ms == 75.0


values = st.recursive(
    st.none() | st.booleans() | st.integers(-99, 99) | st.text("xyz", max_size=4),
    lambda v: st.lists(v, max_size=3),
    max_leaves=6,
).map(py_to_value) | st.tuples(st.integers(), st.text(max_size=3)).map(py_to_value)


@given(values)
def test_value_json_roundtrip(v):
    assert value_from_json(json.loads(json.dumps(value_json(v)))) == v


def test_record_replay_roundtrip(tmp_path):
    inner = mock_env(5)
    rec = RecordingEnv(inner)
    args = [py_to_value(("p", i)) for i in range(3)]
    originals = [rec.call(".llm_query", a).result for a in args]
    path = tmp_path / "calls.log"
    save_log(rec.records, path)

    replay = ReplayEnv.load(path)
    for a, expect in zip(args, originals):
        got = replay.call(".llm_query", a)
        assert got.result == expect
    with pytest.raises(ReplayMiss):
        replay.call(".llm_query", args[0])  # queue exhausted


def test_replay_is_fifo_per_argument(tmp_path):
    records = [
        ExternalCallRecord(0, ".q", '(1)', Leaf("a"), 10.0),
        ExternalCallRecord(1, ".q", '(1)', Leaf("b"), 10.0),
    ]
    path = tmp_path / "l.log"
    save_log(records, path)
    env = ReplayEnv.load(path)
    arg = Tup((Leaf(1),))
    assert env.call(".q", arg).result == Leaf("a")
    assert env.call(".q", arg).result == Leaf("b")


def test_replay_miss_on_unknown_argument():
    env = ReplayEnv([ExternalCallRecord(0, ".q", '(1)', Leaf("a"), 1.0)])
    with pytest.raises(ReplayMiss):
        env.call(".q", Tup((Leaf(2),)))


def test_load_log_rejects_garbage(tmp_path):
    path = tmp_path / "bad.log"
    path.write_text('{"seq": 0}\n')
    with pytest.raises(EnvError):
        load_log(path)


def test_recording_preserves_latency(tmp_path):
    rec = RecordingEnv(FixtureEnv({"responses": [
        {"fn": ".q", "arg": [1], "result": 5, "latency_ms": 123.0}]}))
    rec.call(".q", Tup((Leaf(1),)))
    path = tmp_path / "l.log"
    save_log(rec.records, path)
    assert load_log(path)[0].latency_ms == 123.0


def test_instrumented_counts_calls():
    env = InstrumentedEnv(mock_env(1))
    env.call(".query_int", Leaf(1))
    env.call(".query_int", Leaf(1))
    env.call(".query_str", Leaf(2))
    assert len(env.calls) == 3
    assert env.calls[0] == env.calls[1]


def test_mock_latencies_within_band():
    env = MockEnv(9)
    for i in range(20):
        lat = env.call(".query_int", Leaf(i)).latency_ms
        assert 20.0 <= lat <= 120.0
