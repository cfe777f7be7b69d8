from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgopt.core import (EvaluationRecord, EvaluatorKind, MergeNode, Module,
                        ModuleKind, ModuleOrigin, ParseError,
                        PerformanceStats, Task, TaskSet, ToolSpec, Trajectory,
                        canonical_loads, instruction_module,
                        module_content_id, module_from_json, stats_from_json,
                        taskset_from_json, to_json, toolset_module,
                        trajectory_from_json, validate_module,
                        evaluation_from_json, merge_node_from_json)


# ---------------------------------------------------------------------------
# validate_module
# ---------------------------------------------------------------------------

def test_valid_instruction_module():
    m = instruction_module("Extract the reference")
    assert validate_module(m) == []


def test_empty_instruction_payload():
    m = Module(id=module_content_id(ModuleKind.INSTRUCTION, ""),
               kind=ModuleKind.INSTRUCTION, payload="",
               lineage=(), origin=ModuleOrigin.SEED)
    assert validate_module(m) == ["payload empty"]


def test_merged_module_with_single_parent():
    m = Module(id=module_content_id(ModuleKind.INSTRUCTION, "x"),
               kind=ModuleKind.INSTRUCTION, payload="x",
               lineage=("parent",), origin=ModuleOrigin.MERGED)
    assert validate_module(m) == ["origin/lineage mismatch"]


def test_optimized_requires_exactly_one_parent():
    ok = instruction_module("x", lineage=("p",), origin=ModuleOrigin.OPTIMIZED)
    assert validate_module(ok) == []
    bad = instruction_module("x", lineage=("p", "q"), origin=ModuleOrigin.OPTIMIZED)
    assert validate_module(bad) == ["origin/lineage mismatch"]


def test_toolset_rules():
    tools = (ToolSpec(name="read_file", description="reads", body="..."),)
    assert validate_module(toolset_module(tools)) == []
    empty_seed = toolset_module(())
    assert validate_module(empty_seed) == []
    empty_optimized = toolset_module((), lineage=("p",), origin=ModuleOrigin.OPTIMIZED)
    assert "toolset empty for non-seed module" in validate_module(empty_optimized)
    dupes = toolset_module((ToolSpec("f", "a"), ToolSpec("f", "b")))
    assert "duplicate tool name: f" in validate_module(dupes)
    bad_name = toolset_module((ToolSpec("9lives", "a"),))
    assert "invalid tool name: 9lives" in validate_module(bad_name)


def test_content_addressed_ids():
    a = instruction_module("same text")
    b = instruction_module("same text", lineage=("x",), origin=ModuleOrigin.OPTIMIZED)
    assert a.id == b.id  # lineage lives outside the hash
    c = instruction_module("different text")
    assert c.id != a.id


# ---------------------------------------------------------------------------
# serialization round trips
# ---------------------------------------------------------------------------

def test_module_round_trip():
    m = instruction_module("hello", lineage=("p",), origin=ModuleOrigin.OPTIMIZED)
    assert module_from_json(to_json(m)) == m


def test_toolset_round_trip():
    m = toolset_module((ToolSpec("f", "desc", (("x", "an int"),), "body"),
                        ToolSpec("g", "other")))
    assert module_from_json(to_json(m)) == m


def test_merge_node_round_trip_preserves_children_order():
    stats = PerformanceStats(module_id="m", task_ids=("a", "b"),
                             successes=1, trials=2)
    node = MergeNode(node_id="n1", module_id="m",
                     children=("c3", "c1", "c2"),
                     covered_task_ids=frozenset({"a", "b"}),
                     backtest=stats, depth=1)
    parsed = merge_node_from_json(to_json(node))
    assert parsed == node
    assert parsed.children == ("c3", "c1", "c2")


def test_serialization_is_byte_stable():
    m = instruction_module("stable")
    assert to_json(m) == to_json(instruction_module("stable"))


def test_truncated_stream_is_parse_error():
    text = to_json(instruction_module("hello"))
    with pytest.raises(ParseError):
        module_from_json(text[: len(text) // 2])


def test_parse_error_names_first_offending_field():
    with pytest.raises(ParseError, match="kind"):
        module_from_json('{"id": "x"}')
    with pytest.raises(ParseError, match="label"):
        taskset_from_json('{"name": "s", "tasks": [{"id": "a", "query": "q"}]}')


def test_unknown_enum_value_rejected():
    with pytest.raises(ParseError, match="origin"):
        module_from_json('{"id": "x", "kind": "instruction", "payload": "p", '
                         '"lineage": [], "origin": "wat"}')


# ---------------------------------------------------------------------------
# construction invariants
# ---------------------------------------------------------------------------

def test_task_label_must_be_nonempty():
    with pytest.raises(ValueError):
        Task(id="t", query="q", label="")


def test_taskset_rejects_duplicate_ids():
    t = Task(id="t", query="q", label="l")
    with pytest.raises(ValueError):
        TaskSet(name="s", tasks=(t, t))


def test_exact_match_success_requires_full_score():
    with pytest.raises(ValueError):
        EvaluationRecord(task_id="t", success=True, score=0.5, critique="",
                         evaluator_kind=EvaluatorKind.EXACT_MATCH)


def test_failed_judge_requires_critique():
    with pytest.raises(ValueError):
        EvaluationRecord(task_id="t", success=False, score=0.0, critique="",
                         evaluator_kind=EvaluatorKind.LLM_JUDGE)


def test_stats_rate_is_exact_fraction():
    stats = PerformanceStats(module_id="m", task_ids=tuple("abc"),
                             successes=1, trials=3)
    assert stats.success_rate == Fraction(1, 3)
    assert stats.rate_text() == "1/3 (0.333)"


def test_stats_bounds():
    with pytest.raises(ValueError):
        PerformanceStats(module_id="m", task_ids=(), successes=2, trials=1)
    with pytest.raises(ValueError):
        PerformanceStats(module_id="m", task_ids=(), successes=0, trials=0)


def test_merge_node_backtest_iff_internal():
    stats = PerformanceStats(module_id="m", task_ids=("a",), successes=1, trials=1)
    with pytest.raises(ValueError):
        MergeNode(node_id="n", module_id="m", children=(),
                  covered_task_ids=frozenset({"a"}), backtest=stats, depth=0)
    with pytest.raises(ValueError):
        MergeNode(node_id="n", module_id="m", children=("c",),
                  covered_task_ids=frozenset({"a"}), backtest=None, depth=1)


# ---------------------------------------------------------------------------
# property tests: round-trip law on generated values
# ---------------------------------------------------------------------------

_ident = st.from_regex(r"[a-z][a-z0-9_]{0,10}", fullmatch=True)
_text = st.text(min_size=0, max_size=40)


def _modules():
    instructions = st.builds(
        lambda text, origin, parents: instruction_module(
            text, lineage=parents, origin=origin),
        st.text(min_size=1, max_size=60),
        st.just(ModuleOrigin.SEED), st.just(()))
    tools = st.lists(
        st.builds(ToolSpec, name=_ident, description=_text,
                  signature=st.lists(st.tuples(_ident, _text), max_size=3).map(tuple),
                  body=_text),
        max_size=3).map(tuple)
    toolsets = tools.map(lambda ts: toolset_module(ts))
    return st.one_of(instructions, toolsets)


@settings(max_examples=60, deadline=None)
@given(_modules())
def test_module_round_trip_property(m):
    assert module_from_json(to_json(m)) == m


@settings(max_examples=60, deadline=None)
@given(st.builds(Trajectory,
                 task_id=_ident,
                 steps=st.lists(st.tuples(_text, _text), min_size=1, max_size=5).map(tuple),
                 final_answer=st.one_of(st.none(), _text),
                 truncated=st.booleans()))
def test_trajectory_round_trip_property(traj):
    assert trajectory_from_json(to_json(traj)) == traj


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=50), st.data())
def test_stats_round_trip_property(trials, data):
    successes = data.draw(st.integers(min_value=0, max_value=trials))
    stats = PerformanceStats(module_id="m", task_ids=tuple(f"t{i}" for i in range(trials)),
                             successes=successes, trials=trials,
                             prompt_tokens=data.draw(st.integers(0, 10000)),
                             completion_tokens=data.draw(st.integers(0, 10000)),
                             wall_clock_ms=data.draw(st.integers(0, 10000)))
    parsed = stats_from_json(to_json(stats))
    assert parsed == stats
    assert parsed.success_rate == Fraction(successes, trials)


@settings(max_examples=60, deadline=None)
@given(st.booleans(), _ident, _text)
def test_evaluation_round_trip_property(success, task_id, critique):
    record = EvaluationRecord(task_id=task_id, success=success,
                              score=1.0 if success else 0.0,
                              critique=critique or "because",
                              evaluator_kind=EvaluatorKind.EXACT_MATCH)
    assert evaluation_from_json(to_json(record)) == record


def test_canonical_loads_rejects_non_json():
    with pytest.raises(ParseError):
        canonical_loads(b"\xff\xfe not json")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.builds(Task, id=_ident, query=_text,
                          label=st.text(min_size=1, max_size=20),
                          category=st.one_of(st.none(), _ident),
                          payload_path=st.one_of(st.none(), _text)),
                max_size=6, unique_by=lambda t: t.id))
def test_taskset_round_trip_property(tasks):
    ts = TaskSet(name="prop", tasks=tuple(tasks))
    assert taskset_from_json(to_json(ts)) == ts


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=4), st.booleans(), st.data())
def test_merge_node_round_trip_property(child_count, internal, data):
    children = tuple(f"c{i}" for i in range(child_count)) if internal else ()
    covered = frozenset(data.draw(st.sets(_ident, min_size=1, max_size=5)))
    backtest = None
    if children:
        trials = data.draw(st.integers(1, 9))
        backtest = PerformanceStats(
            module_id="m", task_ids=tuple(sorted(covered)),
            successes=data.draw(st.integers(0, trials)), trials=trials)
    node = MergeNode(node_id="n", module_id="m", children=children,
                     covered_task_ids=covered, backtest=backtest,
                     depth=data.draw(st.integers(0, 5)))
    assert merge_node_from_json(to_json(node)) == node
