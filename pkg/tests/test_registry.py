from __future__ import annotations

from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sotaengine.errors import ConfigError, InvalidTransitionError, UnknownTaskError
from sotaengine.registry import (
    STAGES,
    MetricDescriptor,
    PaperTask,
    ReadinessVerdict,
    Registry,
    ResourceEntry,
    check_stage_transition,
    gate_tasks,
    total_size,
)

METRIC = MetricDescriptor("acc", "maximize", Decimal("0.5"))


def task(seq, **kw):
    return PaperTask(seq, "ICML", f"paper {seq}", f"repo{seq}", METRIC, **kw)


def test_persisted_registry_reloads_identically(tmp_path):
    reg = Registry(tmp_path)
    reg.add_task(task(3))
    reg.add_task(task(1))
    reg.set_readiness(3, ReadinessVerdict(True, 12, True, "actionable", "has code"))
    reg.register_resources(3, [ResourceEntry(3, "http://h/a.bin", "model", 10)])
    reg.set_stage(1, "failed")
    again = Registry.load(tmp_path)
    assert again.seqs() == [3, 1]
    assert again.serialize() == reg.serialize()
    assert again.task(3).readiness.actionable
    assert again.task(1).stage == "failed"


def test_duplicate_registration_is_a_no_op(tmp_path):
    reg = Registry(tmp_path)
    reg.add_task(task(1))
    e = ResourceEntry(1, "http://h/a", "dataset", 5)
    first = reg.register_resources(1, [e])
    before = (tmp_path / "registry.jsonl").read_bytes()
    second = reg.register_resources(1, [e])
    assert len(first.added) == 1 and second.added == [] and second.duplicates == ["http://h/a"]
    assert (tmp_path / "registry.jsonl").read_bytes() == before


def test_unknown_seq_raises():
    with pytest.raises(UnknownTaskError):
        Registry().task(99)


def test_negative_size_is_indeterminate():
    reg = Registry()
    reg.add_task(task(1))
    reg.register_resources(1, [ResourceEntry(1, "u", "misc", -1)])
    assert reg.resources(1)[0].size_estimate_bytes is None
    assert reg.total_size(1) is None


def test_stage_transitions():
    check_stage_transition("ingested", "resourced")
    check_stage_transition("optimizing", "failed")
    for bad in [("finalized", "failed"), ("optimizing", "ingested"), ("ingested", "bogus")]:
        with pytest.raises(InvalidTransitionError):
            check_stage_transition(*bad)


def _gate_registry():
    reg = Registry()
    sizes = {1: [10, 20], 2: [None], 3: [100], 4: [5], 5: [0]}
    for seq, ss in sizes.items():
        verdict = "placeholder" if seq == 4 else "actionable"
        reg.add_task(task(seq, readiness=ReadinessVerdict(True, 3, True, verdict)))
        reg.register_resources(seq, [ResourceEntry(seq, f"u{seq}-{i}", "misc", s) for i, s in enumerate(ss)])
    return reg


def test_gate_reasons_follow_predicate_order():
    g = gate_tasks(_gate_registry(), 0, 50, history=[5])
    assert g.admitted == [1]
    assert g.excluded == {2: "indeterminate_size", 3: "out_of_range", 4: "not_actionable", 5: "terminal_in_history"}


def test_gate_rejects_inverted_bounds():
    with pytest.raises(ConfigError):
        gate_tasks(Registry(), 10, 1)


@given(st.integers(0, 200), st.integers(0, 200))
def test_gate_partitions_every_task(a, b):
    lo, hi = min(a, b), max(a, b)
    reg = _gate_registry()
    g = gate_tasks(reg, lo, hi)
    assert set(g.admitted) | set(g.excluded) == set(reg.seqs())
    assert not set(g.admitted) & set(g.excluded)
    for seq in g.admitted:
        assert lo <= reg.total_size(seq) <= hi


@given(st.lists(st.integers(-5, 100) | st.none(), max_size=6))
def test_total_size_is_none_iff_any_indeterminate(sizes):
    entries = [ResourceEntry(1, f"u{i}", "misc", s) for i, s in enumerate(sizes)]
    expected = None if any(s is None or s < 0 for s in sizes) else sum(sizes)
    assert total_size(entries) == expected


def test_stage_order_is_fixed():
    assert STAGES[0] == "ingested" and STAGES[-2:] == ("finalized", "failed")
