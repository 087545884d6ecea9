from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from _fixtures import ledger_entry
from sotaengine.errors import EngineError, LeapAborted, ReideationRequired
from sotaengine.ideas import (
    AlignmentReport,
    Hypothesis,
    IdeaLibrary,
    UnknownIdeaError,
    seed_library,
    select_next,
    synthesize_leap,
    update_after_iteration,
)
from sotaengine.redline import audit_library, generic_rules


def h(i, prio=0, typ="PARAM", risk="LOW", touch=(), **kw):
    return Hypothesis(i, f"title {i}", typ, prio, risk=risk, touch_set=frozenset(touch), **kw)


class Ideator:
    def __init__(self, rounds, leaps=()):
        self.rounds = rounds
        self.leaps = list(leaps)

    def propose(self, task, count, round):
        return self.rounds[round] if round < len(self.rounds) else []

    def leap_candidates(self, history, library, count):
        return self.leaps


def cleared_library(*ideas):
    lib = IdeaLibrary(ideas)
    lib.apply_audit(audit_library(lib.ordered(), generic_rules()))
    return lib


def test_seed_drops_misaligned_and_duplicates():
    bad = AlignmentReport(True, False, True, True)
    ideator = Ideator([[h("H1"), (h("H2"), bad), h("H1", 5)], [h("H3")]])
    lib = seed_library(ideator, None, min_count=2)
    assert [x.id for x in lib.ordered()] == ["H1", "H3"] and not lib.degraded


def test_seed_flags_short_library_degraded():
    lib = seed_library(Ideator([[h("H1")]]), None, min_count=10)
    assert lib.degraded and len(lib) == 1


def test_seed_survives_provider_failure():
    class Flaky(Ideator):
        def propose(self, task, count, round):
            if round == 0:
                raise RuntimeError("timeout")
            return super().propose(task, count, round)

    lib = seed_library(Flaky([[], [h("H1")]]), None, min_count=1)
    assert list(lib.ideas) == ["H1"]


def test_library_document_round_trip(tmp_path):
    lib = cleared_library(h("H1", touch={"model_code"}, patch={"kind": "knobs", "set": {"a": 1}}), h("H2", 1, "CODE", touch={"eval_script"}))
    lib.meta["seq"] = 4
    lib.save(tmp_path / "idea_library.md")
    text = (tmp_path / "idea_library.md").read_text()
    assert "## Red line audit" in text
    assert IdeaLibrary.load(tmp_path / "idea_library.md") == lib


@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from(["LOW", "MEDIUM", "HIGH"])), min_size=1, max_size=8))
def test_select_returns_highest_priority_cleared_without_escalation(spec):
    lib = cleared_library(*[h(f"H{i}", p, risk=r) for i, (p, r) in enumerate(spec)])
    expected = min(lib.cleared(), key=lambda x: (x.priority, x.id))
    assert select_next(lib, [], "normal").id == expected.id


def test_select_escalates_after_two_low_executions():
    lib = cleared_library(h("A", 0), h("B", 1), h("C", 2), h("D", 3, risk="MEDIUM"))
    history = [ledger_entry(0, 1, best=True)]
    for it, idea_id in enumerate(["A", "B"], start=1):
        e = ledger_entry(it, 1, idea=idea_id)
        history.append(e)
        update_after_iteration(lib, e)
    assert select_next(lib, history).id == "D"
    assert select_next(lib, history, low_window=3).id == "C"


def test_select_requires_cleared_ideas_and_normal_path():
    lib = IdeaLibrary([h("A")])
    with pytest.raises(ReideationRequired):
        select_next(lib, [])
    with pytest.raises(ValueError):
        select_next(cleared_library(h("A")), [], "leap")


def test_update_statuses():
    lib = cleared_library(h("A"), h("B"), h("C"))
    assert update_after_iteration(lib, ledger_entry(1, 2, best=True, idea="A"))["status"] == "executed_improved"
    assert update_after_iteration(lib, ledger_entry(2, 1, idea="B"))["status"] == "executed_no_gain"
    assert update_after_iteration(lib, ledger_entry(3, None, idea="C", status="crashed"))["status"] == "executed_failed"
    assert lib.get("A").outcome_iterations == [1]
    with pytest.raises(UnknownIdeaError):
        update_after_iteration(lib, ledger_entry(4, 1, idea="Z"))


def test_rejected_idea_cannot_be_executed():
    lib = cleared_library(h("A", touch={"metric_params"}))
    assert lib.get("A").status == "rejected"
    with pytest.raises(EngineError):
        update_after_iteration(lib, ledger_entry(1, 1, idea="A"))


def test_leap_takes_first_cleared_non_param_candidate():
    lib = cleared_library(h("A"))
    cands = [h("L1", typ="PARAM"), h("L2", typ="ALGO", touch={"eval_script"}), h("L3", typ="ALGO"), h("L4", typ="CODE")]
    chosen, log = synthesize_leap(Ideator([], cands), [], lib, generic_rules())
    assert chosen.id == "L3" and chosen.status == "cleared"
    assert [c.accepted for c in log] == [False, False, True]
    assert "L3" in lib.verdicts and "L3" not in lib
    update_after_iteration(lib, ledger_entry(1, 2, best=True, idea="L3", typ="ALGO", path="leap"), chosen)
    assert lib.get("L3").status == "executed_improved"


def test_leap_aborts_when_nothing_clears():
    lib = cleared_library(h("A"))
    with pytest.raises(LeapAborted) as info:
        synthesize_leap(Ideator([], [h("A", typ="ALGO"), h("L2", typ="CODE", touch={"dataset_content"})]), [], lib, generic_rules())
    assert len(info.value.log) == 2


def test_hypothesis_validation():
    with pytest.raises(ValueError):
        h("X", typ="HYPER")
    with pytest.raises(ValueError):
        Hypothesis("X", "t", "CODE", True)
    x = h("X")
    with pytest.raises(EngineError):
        x.move("in_progress")
