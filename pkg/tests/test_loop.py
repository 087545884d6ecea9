from __future__ import annotations

import itertools
from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from _fixtures import file_patch, honeymoon_scenario, idea_dict, make_loop
from sotaengine import _io
from sotaengine.harness import default_score
from sotaengine.loop import (
    LeapState,
    LoopState,
    bundle_dir,
    decide_path,
    honeymoon_tick,
    meets_threshold,
    verify_bundle,
)
from sotaengine.vcs import BEST_TAG, parse_ledger, tree_hash, validate_ledger


@given(st.lists(st.sampled_from(["PARAM", "CODE", "ALGO"]), max_size=8), st.integers(1, 4))
def test_decide_path_definition(types, w):
    expected = "leap" if len(types) >= w and set(types[-w:]) == {"PARAM"} else "normal"
    assert decide_path(types, w) == expected


def test_decide_path_rejects_bad_window():
    with pytest.raises(ValueError):
        decide_path([], 0)


@pytest.mark.parametrize("length,rollback_after", [(5, 6), (0, 1), (2, 3)])
def test_honeymoon_counts_leap_iteration(length, rollback_after):
    leap = LeapState(6, "snap", Decimal(1))
    outcomes = [honeymoon_tick(leap, False, length) for _ in range(rollback_after)]
    assert outcomes[-1] == "rollback_to_pre_leap"
    assert set(outcomes[:-1]) <= {"continue_leap"}
    assert honeymoon_tick(LeapState(0, "s", Decimal(1)), True, length) == "exit_leap_improved"


def test_threshold_direction():
    assert meets_threshold(Decimal("0.58"), Decimal("0.58"), "maximize")
    assert not meets_threshold(Decimal("0.57"), Decimal("0.58"), "maximize")
    assert meets_threshold(Decimal("3"), Decimal("4"), "minimize")
    assert not meets_threshold(None, Decimal("4"), "minimize")


def test_loop_state_round_trip():
    s = LoopState("P3", 4, "abc", Decimal("0.5"), LeapState(3, "x", Decimal("0.4"), 2), stop_reason="threshold")
    assert LoopState.from_dict(s.to_dict()) == s


def test_honeymoon_restores_pre_leap_best(tmp_path):
    loop = honeymoon_scenario(tmp_path)
    loop.run_phase0()
    loop.run_phase1()
    loop.run_phase2()
    entries = [loop.run_iteration() for _ in range(3)]
    pre_leap = loop.state.best_snapshot
    assert [e.is_best for e in entries] == [True, False, False]
    leap = loop.run_iteration()
    assert leap.path == "leap" and leap.idea_id == "L1"
    assert (loop.paths.workspace / "model.py").exists()
    for i in range(4):
        e = loop.run_iteration()
        assert e.status == "ok" and loop.state.leap is not None, i
    last = loop.run_iteration()
    assert last.status == "rolled_back" and loop.state.leap is None
    assert tree_hash(loop.paths.workspace) == pre_leap == loop.vcs.tag(BEST_TAG)
    assert validate_ledger(parse_ledger(loop.paths.scores), "maximize") == []


def test_crash_is_repaired_from_hints_and_recorded(tmp_path):
    sim = {
        "knobs": {"a": 0, "b": 0, "c": 0},
        "faults": [{"id": "dep", "when": {"a": 2}, "message": "ModuleNotFoundError: No module named 'apex'", "fixed_by": "pip install apex"}],
        "repair_hints": ["clear cache", "pip install apex"],
    }
    loop = make_loop(tmp_path, [idea_dict("P1", patch={"kind": "knobs", "set": {"a": 2}})], sim=sim, max_iterations=1, debug_budget=2)
    out = loop.run()
    assert out.best_value == default_score({"a": 2})
    recs = _io.read_jsonl(loop.paths.local_memory)
    assert [(r["action"]["label"], r["outcome"]) for r in recs] == [("clear cache", "no_effect"), ("pip install apex", "fixed")]


def test_debug_budget_exhaustion_rolls_back(tmp_path):
    sim = {"knobs": {"a": 0, "b": 0, "c": 0}, "faults": [{"when": {"a": 1}, "message": "segfault", "fixed_by": "never"}]}
    loop = make_loop(tmp_path, [idea_dict("P1", patch={"kind": "knobs", "set": {"a": 1}})], sim=sim, max_iterations=1)
    before = None
    loop.run_phase0()
    before = tree_hash(loop.paths.workspace)
    loop.run_phase1()
    loop.run_phase2()
    e = loop.run_iteration()
    assert e.status == "crashed" and e.primary_value is None
    assert tree_hash(loop.paths.workspace) == before
    assert loop.library.get("P1").status == "executed_failed"


def test_r4_veto_blocks_new_best(tmp_path):
    sim = {"knobs": {"a": 0, "b": 0, "c": 0}, "aux_metrics": {"latency": {"base": "100", "knob": "a", "per_unit": "20"}}}
    loop = make_loop(tmp_path, [idea_dict("P1", patch={"kind": "knobs", "set": {"a": 1}})], sim=sim, max_iterations=1,
                     metric_directions={"latency": "minimize"})
    out = loop.run()
    [_, e] = parse_ledger(loop.paths.scores)
    assert not e.is_best and e.note.startswith("R4") and out.best_value == Decimal("0.50")


def test_blocked_when_nothing_clears(tmp_path):
    ideas = [idea_dict("P1", touch=["eval_script"])]
    loop = make_loop(tmp_path, ideas, reideation=[idea_dict("P2", touch=["dataset_content"])], max_iterations=3)
    out = loop.run()
    assert out.stop_reason == "blocked" and out.iterations == 0 and out.stage == "finalized"


def test_reideation_recovers(tmp_path):
    ideas = [idea_dict("P1", touch=["eval_script"])]
    loop = make_loop(tmp_path, ideas, reideation=[idea_dict("P2", patch={"kind": "knobs", "set": {"a": 3}})], max_iterations=3)
    out = loop.run()
    assert out.best_value == Decimal("0.56") and loop.state.reideated


def test_baseline_failure_fails_task(tmp_path):
    sim = {"knobs": {"a": 0, "b": 0, "c": 0}, "faults": [{"when": {"a": 0}, "message": "boom"}]}
    out = make_loop(tmp_path, [idea_dict("P1")], sim=sim).run()
    assert out.stage == "failed" and "baseline" in out.stop_reason


def test_wall_clock_budget_terminates(tmp_path):
    tick = itertools.count()
    loop = make_loop(tmp_path, clock=lambda: float(next(tick)), wall_clock_limit=30, max_iterations=100)
    out = loop.run()
    assert out.stop_reason == "terminated" and 0 < out.iterations < 24


def test_grid_run_exports_verified_bundle(tmp_path):
    loop = make_loop(tmp_path, success_threshold="0.58", max_iterations=60)
    out = loop.run(tmp_path / "out")
    assert out.stop_reason == "threshold" and out.best_value >= Decimal("0.58")
    assert out.bundle == bundle_dir(tmp_path / "out", 1)
    ok, problems = verify_bundle(out.bundle)
    assert ok, problems
    final = _io.load_json(out.bundle / "final.json")
    assert final["warning"] is None and final["final_value"] == final["best_value"]
    knobs = _io.load_json(out.bundle / "workspace/sim.json")["knobs"]
    assert default_score(knobs) == out.best_value
    types = [e.idea_type for e in parse_ledger(loop.paths.scores)[1:]]
    assert "ALGO" in types


def test_bundle_verification_detects_damage(tmp_path):
    loop = make_loop(tmp_path, max_iterations=3)
    out = loop.run(tmp_path / "out")
    (out.bundle / "final.json").unlink()
    assert not verify_bundle(out.bundle)[0]


def test_file_patch_ideas_apply(tmp_path):
    loop = make_loop(tmp_path, [idea_dict("C1", "CODE", patch=file_patch("x.py", "x = 1\n"))], max_iterations=1)
    loop.run()
    [_, e] = parse_ledger(loop.paths.scores)
    assert e.status == "rolled_back"
    assert not (loop.paths.workspace / "x.py").exists()
    assert _io.read_jsonl(loop.paths.provenance)[0]["files"] == ["x.py"]
