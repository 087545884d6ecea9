from __future__ import annotations

import json
import sys
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _fixtures import sim_task, tree_files
from sotaengine import _io
from sotaengine.errors import EngineError, PatchConflict, PlanHalted
from sotaengine.failure import RepairAction
from sotaengine.harness import (
    DEFAULT_SIM,
    PLAN_STAGES,
    EntryCommand,
    FilePlanner,
    ProcessBackend,
    SandboxPool,
    SimPlanner,
    SimulationBackend,
    apply_modification,
    brute_force,
    default_score,
    grid_points,
    knob_patch,
    plan_initialization,
)

SIM_ENTRY = EntryCommand(("sim-eval", "sim.json"))


def sim_ws(tmp_path, **cfg):
    ws = tmp_path / "ws"
    ws.mkdir()
    _io.atomic_write_json(ws / "sim.json", {"knobs": {"a": 0, "b": 0, "c": 0}, **cfg})
    return ws


def test_plan_runs_all_stages_and_persists(tmp_path):
    ws = sim_ws(tmp_path)
    plan = plan_initialization(sim_task(), SimPlanner(ws), tmp_path / "plan.json")
    assert plan.complete and plan.entry_commands == [SIM_ENTRY]
    assert _io.load_json(tmp_path / "plan.json")["stages"] == [[s, "done"] for s in PLAN_STAGES]


def test_plan_halts_then_resumes_at_failed_stage(tmp_path):
    ws = sim_ws(tmp_path)
    seen = []
    with pytest.raises(PlanHalted):
        plan_initialization(sim_task(), SimPlanner(ws, fail_at="dependency_resolution"), tmp_path / "p.json", lambda s, e: seen.append(s))
    assert seen == ["dependency_resolution"]
    planner = SimPlanner(ws)
    plan_initialization(sim_task(), planner, tmp_path / "p.json")
    assert planner.calls == list(PLAN_STAGES[PLAN_STAGES.index("dependency_resolution"):])


def test_plan_without_entry_command_halts(tmp_path):
    with pytest.raises(PlanHalted):
        plan_initialization(sim_task(), FilePlanner(tmp_path), tmp_path / "p.json")


def test_pool_allows_one_live_sandbox_per_task(tmp_path):
    pool = SandboxPool()
    h = pool.open(1, tmp_path)
    with pytest.raises(EngineError):
        pool.open(1, tmp_path)
    pool.open(2, tmp_path)
    pool.close(h)
    assert set(pool.live()) == {2}
    pool.open(1, tmp_path)


def test_landscape_oracle():
    scores = dict((tuple(p.values()), s) for p, s in brute_force(DEFAULT_SIM["grid"]))
    assert len(scores) == 24
    assert scores[(0, 0, 0)] == Decimal("0.50") and max(scores.values()) == Decimal("0.60")
    assert grid_points({"b": [0, 1], "a": [5]}) == [{"a": 5, "b": 0}, {"a": 5, "b": 1}]


def test_sim_evaluation_faults_and_repair(tmp_path):
    ws = sim_ws(tmp_path, faults=[{"id": "f", "when": {"a": 1}, "message": "Traceback\nNo module named 'x'", "fixed_by": "pip install x"}])
    be = SimulationBackend()
    sbx = be.pool.open(1, ws)
    assert be.run_evaluation(sbx, SIM_ENTRY).primary_value == Decimal("0.50")
    apply_modification(ws, knob_patch(a=1))
    res = be.run_evaluation(sbx, SIM_ENTRY)
    assert res.exit == "crashed" and res.reason == "No module named 'x'"
    assert not be.repair(sbx, RepairAction("wrong"))
    assert be.repair(sbx, RepairAction("pip install x"))
    assert be.run_evaluation(sbx, SIM_ENTRY).primary_value == default_score({"a": 1})


def test_sim_timeout_and_closed_sandbox(tmp_path):
    ws = sim_ws(tmp_path, eval_seconds=30)
    be = SimulationBackend()
    sbx = be.pool.open(1, ws)
    assert be.run_evaluation(sbx, SIM_ENTRY, timeout=5).exit == "timeout"
    be.pool.close(sbx)
    with pytest.raises(EngineError):
        be.run_evaluation(sbx, SIM_ENTRY)


def test_sim_noise_is_seeded(tmp_path):
    ws = sim_ws(tmp_path, noise="0.01")
    vals = []
    for seed in (1, 1, 2):
        be = SimulationBackend(seed)
        vals.append(be.run_evaluation(be.pool.open(1, ws), SIM_ENTRY).primary_value)
    assert vals[0] == vals[1] != vals[2]


def test_process_backend_reads_last_json_line(tmp_path):
    script = tmp_path / "eval.py"
    script.write_text("import json, sys\nprint('warming up')\nprint(json.dumps({'acc': 0.71, 'f1': 0.5}))\n")
    be = ProcessBackend("acc")
    sbx = be.pool.open(1, tmp_path)
    res = be.run_evaluation(sbx, EntryCommand((sys.executable, "eval.py")), timeout=30)
    assert res.ok and res.primary_value == Decimal("0.71") and res.metrics["f1"] == Decimal("0.5")
    script.write_text("import sys\nsys.stderr.write('boom\\n')\nsys.exit(3)\n")
    res = be.run_evaluation(sbx, EntryCommand((sys.executable, "eval.py")), timeout=30)
    assert res.exit == "crashed" and res.reason == "boom"
    script.write_text("import time\ntime.sleep(5)\n")
    assert be.run_evaluation(sbx, EntryCommand((sys.executable, "eval.py")), timeout=0.5).exit == "timeout"


def test_file_patch_applies_and_records_provenance(tmp_path):
    ws = tmp_path / "ws"
    ws.mkdir()
    (ws / "model.py").write_text("depth = 4\nwidth = 8\n")
    (ws / "old.txt").write_text("x")
    patch = {"kind": "files", "edits": [
        {"path": "model.py", "old": "depth = 4", "new": "depth = 6"},
        {"path": "new/cfg.yaml", "content": "lr: 1\n"},
        {"path": "old.txt", "delete": True},
    ]}
    apply_modification(ws, patch, "H1", tmp_path / "prov.jsonl")
    assert tree_files(ws) == {"model.py": b"depth = 6\nwidth = 8\n", "new/cfg.yaml": b"lr: 1\n"}
    [rec] = _io.read_jsonl(tmp_path / "prov.jsonl")
    assert rec["idea_id"] == "H1" and rec["files"] == ["model.py", "new/cfg.yaml", "old.txt"]


@pytest.mark.parametrize("patch", [
    {"kind": "files", "edits": [{"path": "model.py", "content": "x"}, {"path": "missing.py", "old": "a", "new": "b"}]},
    {"kind": "files", "edits": [{"path": "model.py", "old": "zzz", "new": "b"}]},
    {"kind": "files", "edits": [{"path": "../escape.py", "content": "x"}]},
    {"kind": "files", "edits": [{"path": "model.py", "delete": True}, {"path": "model.py", "old": "depth", "new": "d"}]},
    {"kind": "knobs", "set": {"zeta": 1}},
    {"kind": "knobs", "set": {"a": 1}, "expect": {"a": 2}},
    {"kind": "teleport"},
])
def test_conflicting_patch_leaves_tree_untouched(tmp_path, patch):
    ws = sim_ws(tmp_path)
    (ws / "model.py").write_text("depth = 4\n")
    before = tree_files(ws)
    with pytest.raises(PatchConflict):
        apply_modification(ws, patch)
    assert tree_files(ws) == before


def test_empty_patch_is_a_no_op(tmp_path):
    ws = sim_ws(tmp_path)
    before = tree_files(ws)
    assert apply_modification(ws, None) and apply_modification(ws, {})
    assert tree_files(ws) == before


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(0, 1), st.integers(0, 2))
def test_knob_patch_then_evaluate_matches_landscape(tmp_path_factory, a, b, c):
    ws = sim_ws(tmp_path_factory.mktemp("k"))
    apply_modification(ws, knob_patch(a=a, b=b, c=c))
    be = SimulationBackend()
    assert be.run_evaluation(be.pool.open(1, ws), SIM_ENTRY).primary_value == default_score({"a": a, "b": b, "c": c})
    assert json.loads((ws / "sim.json").read_text())["knobs"] == {"a": a, "b": b, "c": c}
