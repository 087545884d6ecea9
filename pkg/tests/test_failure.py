from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from _fixtures import FAILURE_TEXTS
from sotaengine.failure import (
    FailureMemory,
    FailureSignature,
    RepairAction,
    classify,
    mask,
    normalize,
    promote,
    retrieve,
)


@pytest.mark.parametrize("raw,masked", [
    ("at 2024-01-02 03:04:05.123Z boom", "at <TS> boom"),
    ("GET https://x.org/a?b=1 failed", "GET <ADDR> failed"),
    ("connect 10.1.2.3:8080 refused", "connect <ADDR> refused"),
    ("host 192.168.0.1 down", "host <ADDR> down"),
    ("open '/a/b/c.txt' failed", "open '<PATH>' failed"),
    ("ptr 0xdeadbeef sha 1a2b3c4d5e", "ptr <HEX> sha <HEX>"),
    ("torch 2.1.0+cu118 line 42", "torch <VER>+cu<VER> line <VER>"),
    ("a   b\n\tc", "a b c"),
])
def test_mask_rules(raw, masked):
    assert mask(raw) == masked


def test_fixture_groups_collapse_to_one_signature_each():
    by_group: dict[str, set[str]] = {}
    for group, text in FAILURE_TEXTS:
        by_group.setdefault(group, set()).add(str(normalize(text)))
    assert all(len(s) == 1 for s in by_group.values()), by_group
    assert len({next(iter(s)) for s in by_group.values()}) == len(by_group) == 8


@pytest.mark.parametrize("text,cls", [
    ("CUDA out of memory", "out_of_memory"),
    ("No module named 'x'", "package_install"),
    ("Read timed out", "network_download"),
    ("No such file or directory", "path_missing"),
    ("Permission denied", "permission"),
    ("IndentationError: unexpected indent", "syntax"),
    ("something odd", "unknown"),
])
def test_classify(text, cls):
    assert classify(text) == cls


def test_normalize_rejects_empty():
    with pytest.raises(ValueError):
        normalize("   ")


def test_signature_parse_round_trip():
    sig = normalize("No module named 'x'", "install")
    assert FailureSignature.parse(str(sig)).key == sig.key
    with pytest.raises(ValueError):
        FailureSignature.parse("nocolon")


def test_memory_persists_and_folds(tmp_path):
    sig = normalize("No module named 'x'")
    mem = FailureMemory(tmp_path / "m.jsonl", "local")
    a = RepairAction("pip install x", {"version": "1"})
    mem.record(sig, a, "no_effect")
    mem.record(sig, a, "fixed")
    again = FailureMemory(tmp_path / "m.jsonl", "local")
    [rec] = again.find(sig)
    assert rec.outcomes == ["no_effect", "fixed"] and rec.fixed == 1
    with pytest.raises(ValueError):
        mem.record(sig, a, "maybe")
    with pytest.raises(ValueError):
        FailureMemory(None, "team")


def test_retrieval_ranking_and_exhaustion():
    sig = FailureSignature("package_install", "f1")
    other = FailureSignature("package_install", "f2")
    mem = FailureMemory(None, "local")
    glob = FailureMemory(None, "global")
    a, b, c, d = (RepairAction(x) for x in "abcd")
    mem.record(sig, a, "fixed")
    glob.record(sig, b, "fixed")
    glob.record(sig, b, "fixed")
    mem.record(sig, c, "no_effect")  # exhausted on this exact signature
    glob.record(other, c, "fixed")
    glob.record(other, d, "fixed")
    glob.record(FailureSignature("syntax", "f1"), RepairAction("e"), "fixed")
    assert retrieve(sig, [mem, glob]) == [b, a, d]
    assert retrieve(FailureSignature("permission", "z"), [mem, glob]) == []


def test_action_params_distinguish_actions():
    assert RepairAction("pin", {"v": 1}) != RepairAction("pin", {"v": 2})
    assert RepairAction("pin", {"v": 1}) == RepairAction("pin", {"v": 1})


def test_promote_copies_only_the_named_action(tmp_path):
    sig = FailureSignature("syntax", "f")
    local = FailureMemory(tmp_path / "l.jsonl", "local")
    local.record(sig, RepairAction("fix indent"), "fixed")
    local.record(sig, RepairAction("other"), "fixed")
    glob = FailureMemory(tmp_path / "g.jsonl", "global")
    assert promote(local, glob, sig, "fix indent") == 1
    assert [r.action.label for r in FailureMemory(tmp_path / "g.jsonl", "global").find(sig)] == ["fix indent"]
    assert promote(local, glob, sig, "missing") == 0


@given(st.integers(0, 2**32 - 1))
def test_retrieve_never_returns_an_exhausted_action(seed):
    rng = random.Random(seed)
    sigs = [FailureSignature(c, f) for c in ("syntax", "permission") for f in ("f1", "f2", "f3")]
    actions = [RepairAction(f"act{i}") for i in range(5)]
    mems = [FailureMemory(None, "local"), FailureMemory(None, "global")]
    for _ in range(rng.randint(0, 40)):
        rng.choice(mems).record(rng.choice(sigs), rng.choice(actions), rng.choice(["fixed", "no_effect", "worsened"]))
    for sig in sigs:
        for action in retrieve(sig, mems):
            exact = [o for m in mems for r in m.find(sig) if r.action == action for o in r.outcomes]
            assert not exact or "fixed" in exact
