from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sotaengine import _io


def test_atomic_write_replaces_whole_file(tmp_path):
    p = tmp_path / "a" / "state.json"
    _io.atomic_write_json(p, {"v": 1})
    _io.atomic_write_json(p, {"v": 2})
    assert json.loads(p.read_text()) == {"v": 2}
    assert [f.name for f in p.parent.iterdir()] == ["state.json"]


@pytest.mark.parametrize("n", [0, 1])
def test_crash_during_atomic_write_keeps_old_content(tmp_path, n):
    p = tmp_path / "state.json"
    _io.atomic_write_json(p, {"v": 1})
    with pytest.raises(_io.SimulatedCrash):
        with _io.inject_faults(_io.CrashAfter(n)):
            _io.atomic_write_json(p, {"v": 2})
    assert _io.load_json(p) == {"v": 1}


def test_torn_append_is_ignored_then_repaired(tmp_path):
    p = tmp_path / "log.jsonl"
    _io.append_jsonl(p, {"i": 0})
    with pytest.raises(_io.SimulatedCrash):
        with _io.inject_faults(_io.CrashAfter(1)):  # before, partial
            _io.append_jsonl(p, {"i": 1, "pad": "x" * 40})
    assert not p.read_bytes().endswith(b"\n")
    assert _io.read_jsonl(p) == [{"i": 0}]
    _io.append_jsonl(p, {"i": 2})
    assert _io.read_jsonl(p) == [{"i": 0}, {"i": 2}]


def test_append_rejects_multiline_record(tmp_path):
    with pytest.raises(ValueError):
        _io.append_line(tmp_path / "x", "a\nb")


def test_crash_after_counts_boundaries_on_dry_run(tmp_path):
    hook = _io.CrashAfter(None, prefix="write:")
    with _io.inject_faults(hook):
        _io.atomic_write_text(tmp_path / "f", "hello")
        _io.append_line(tmp_path / "g", "x")
    assert hook.labels == ["write:f:partial", "write:f:before-rename", "write:f:done"]


def test_fault_hook_is_restored():
    with _io.inject_faults(lambda label: None):
        pass
    assert _io._fault_hook is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=8), max_size=3), max_size=8))
def test_jsonl_round_trip(tmp_path_factory, records):
    p = tmp_path_factory.mktemp("rt") / "log.jsonl"
    for r in records:
        _io.append_jsonl(p, r)
    assert _io.read_jsonl(p) == records
