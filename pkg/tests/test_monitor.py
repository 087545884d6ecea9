from __future__ import annotations

import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sotaengine.monitor import (
    FALLBACK_MANUAL_ENV,
    GUIDANCE_FAILURE_SKILL,
    Budget,
    MonitorState,
    StagnationPolicy,
    SupervisoryAction,
    TraceEvent,
    TraceLog,
    classify_phase,
    detect_stagnation,
    memory_docs,
    supervise,
)


def ticker(start=0.0):
    c = itertools.count()
    return lambda: start + next(c)


def ev(i, kind="tool_invocation", digest="x", success=None):
    return TraceEvent(float(i), kind, digest, success)


events = st.lists(
    st.builds(
        lambda kind, d, s: (kind, d, s),
        st.sampled_from(["assistant_output", "tool_invocation", "execution_result"]),
        st.sampled_from(["pip install a", "pip install b", "python eval.py", "report"]),
        st.sampled_from([None, True, False]),
    ),
    min_size=1,
    max_size=25,
)


def build(raw, offset=0):
    return [ev(offset + i, k, d, s) for i, (k, d, s) in enumerate(raw)]


@given(events, events)
def test_stagnation_is_pure_and_ignores_history_before_success(prefix, tail):
    trace = build(tail)
    policy = StagnationPolicy(3, 5)
    assert detect_stagnation(trace, policy) == detect_stagnation(list(trace), policy)
    joined = build(prefix) + [ev(len(prefix), "execution_result", "ok", True)] + build(tail, len(prefix) + 1)
    if not any(k == "execution_result" and s for k, _, s in tail):
        assert detect_stagnation(joined, policy) == detect_stagnation(trace, policy)


def test_repeat_and_cycle_detection():
    same = [ev(i, digest="pip install torch", success=False) for i in range(3)]
    assert detect_stagnation(same).repeated_digest == "pip install torch"
    cyc = [ev(i, digest="AB"[i % 2], success=False) for i in range(4)]
    assert "repeat_failed_action" in detect_stagnation(cyc)
    assert not detect_stagnation(cyc[:2])


def test_no_transition_and_no_progress_window():
    calls = [ev(i) for i in range(5)]
    assert detect_stagnation(calls).kinds == {"no_transition"}
    slow = [ev(0, "execution_result", "ok", True), ev(100, "assistant_output")]
    assert "no_progress_window" in detect_stagnation(slow, StagnationPolicy(no_progress_seconds=60))
    with pytest.raises(ValueError):
        detect_stagnation([])


def test_phase_majority_ties_and_stickiness():
    install = [ev(i, digest="pip install x") for i in range(2)]
    launch = [ev(9, digest="python train.py")]
    assert classify_phase(install + launch) == "install"
    tie = [ev(0, digest="pip install x"), ev(1, digest="Traceback (most recent call last)")]
    assert classify_phase(tie) == "failure_handling"
    assert classify_phase([ev(0, digest="thinking")], last_phase="evaluate") == "evaluate"
    assert classify_phase([ev(0, digest="thinking")]) == "setup"


def test_trace_timestamps_strictly_increase(tmp_path):
    log = TraceLog(tmp_path / "trace.jsonl", clock=lambda: 5.0)
    for _ in range(4):
        log.emit("assistant_output", "hello")
    ts = [e.timestamp for e in log.events]
    assert ts == sorted(set(ts))
    log.note("phase", phase="P1")
    again = TraceLog(tmp_path / "trace.jsonl")
    assert again.events == log.events and again.notes[0]["phase"] == "P1"


def test_payload_is_masked():
    assert TraceEvent.of(0, "tool_invocation", "open /tmp/x.txt at 2024-01-01 00:00:00").digest == "open <PATH> at <TS>"


def test_install_loop_escalates_guidance_then_fallback():
    log = TraceLog(None, ticker())
    state = MonitorState()
    budget = Budget(started_at=0)
    actions = []
    for _ in range(3):
        for _ in range(3):
            log.emit("tool_invocation", "pip install flash-attn", success=False)
        actions.append(supervise(log, state, budget)[1])
    assert [a.kind for a in actions] == ["resume_with_guidance", "fallback", "continue_"]
    assert actions[0].argument == GUIDANCE_FAILURE_SKILL and actions[1].argument == FALLBACK_MANUAL_ENV
    assert [a.kind for _, a in log.actions] == ["resume_with_guidance", "fallback"]


def test_budget_terminates_once_and_regression_rolls_back():
    log = TraceLog(None, ticker())
    log.emit("assistant_output", "start")
    state = MonitorState(best_snapshot="abc")
    _, act = supervise(log, state, Budget(), regression=True)
    assert act == SupervisoryAction("rollback", "abc", act.reason)
    _, act = supervise(log, state, Budget(wall_clock_limit=10, started_at=0), now=11)
    assert act.kind == "terminate" and state.terminated
    assert supervise(log, state, Budget(wall_clock_limit=10), now=12)[1].kind == "continue_"


def test_action_validation():
    with pytest.raises(ValueError):
        SupervisoryAction("terminate")
    with pytest.raises(ValueError):
        SupervisoryAction("explode", reason="x")


def test_memory_docs_versioned(tmp_path):
    docs = memory_docs(tmp_path)
    assert docs.read("code_analysis.md") == ""
    d1 = docs.write("code_analysis.md", "v1")
    d2 = docs.write("code_analysis.md", "v2")
    assert d1 != d2 and docs.read("code_analysis.md") == "v2"
    assert [h["snapshot"] for h in docs.history()] == [d1, d2]
    with pytest.raises(ValueError):
        docs.write("../escape.md", "x")
