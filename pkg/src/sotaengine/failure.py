"""Failure signatures and the retrieval-before-repair memory.

Raw error text is masked (timestamps, addresses, paths, hex digests and
digit runs, in that order) and hashed, so errors that differ only in
volatile tokens share one fingerprint.  Repair attempts and outcomes are
kept per (signature, action) in append-only JSONL stores: one per task
(local) and one shared across tasks (global).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from . import _io

logger = logging.getLogger(__name__)

OUTCOMES = ("fixed", "no_effect", "worsened")
SCOPES = ("local", "global")
UNKNOWN_CLASS = "unknown"

MASK_RULES: tuple[tuple[str, re.Pattern, str], ...] = (
    (
        "timestamp",
        re.compile(r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:[.,]\d+)?(?:Z|[+-]\d{2}:?\d{2})?"),
        "<TS>",
    ),
    ("url", re.compile(r"\b[a-zA-Z][a-zA-Z0-9+.-]*://[^\s'\"<>]+"), "<ADDR>"),
    (
        "host_port",
        re.compile(r"\b(?:\d{1,3}(?:\.\d{1,3}){3}|localhost|[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)+):\d{1,5}\b"),
        "<ADDR>",
    ),
    ("ip", re.compile(r"\b\d{1,3}(?:\.\d{1,3}){3}\b"), "<ADDR>"),
    ("path", re.compile(r"(?<![\w.<>/])(?:~|[A-Za-z]:\\|/)[^\s'\":,()\[\]<>]*[\w\-.]"), "<PATH>"),
    ("hex", re.compile(r"\b(?:0x[0-9a-fA-F]+|(?=[0-9a-fA-F]*\d)[0-9a-fA-F]{7,})\b"), "<HEX>"),
    ("digits", re.compile(r"\d+"), "<VER>"),
)
_VER_CHAIN = re.compile(r"<VER>(?:[.\-_]<VER>)+")
_SPACES = re.compile(r"\s+")


def mask(text: str) -> str:
    """Apply the masking rules in their fixed order and collapse whitespace."""
    for _name, pattern, token in MASK_RULES:
        text = pattern.sub(token, text)
    text = _VER_CHAIN.sub("<VER>", text)
    return _SPACES.sub(" ", text).strip()


def load_class_table(path: str | Path | None = None) -> list[tuple[str, list[re.Pattern]]]:
    if path is None:
        raw = resources.files("sotaengine").joinpath("data/failure_classes.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    table = json.loads(raw)["classes"]
    return [(name, [re.compile(p, re.IGNORECASE) for p in patterns]) for name, patterns in table]


_DEFAULT_TABLE = None


def default_class_table():
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_class_table()
    return _DEFAULT_TABLE


def classify(text: str, table=None) -> str:
    for name, patterns in table or default_class_table():
        if any(p.search(text) for p in patterns):
            return name
    return UNKNOWN_CLASS


@dataclass(frozen=True)
class FailureSignature:
    cls: str
    fingerprint: str
    context: str = ""

    @property
    def key(self) -> tuple[str, str]:
        return (self.cls, self.fingerprint)

    def __str__(self) -> str:
        return f"{self.cls}:{self.fingerprint}"

    @classmethod
    def parse(cls, text: str, context: str = "") -> FailureSignature:
        klass, sep, fp = text.rpartition(":")
        if not sep or not klass or not fp:
            raise ValueError(f"signature must look like class:fingerprint, got {text!r}")
        return cls(klass, fp, context)


def normalize(raw: str, phase: str = "", table=None) -> FailureSignature:
    if not raw or not raw.strip():
        raise ValueError("empty error text")
    masked = mask(raw)
    digest = hashlib.sha256(masked.encode("utf-8")).hexdigest()[:16]
    return FailureSignature(classify(raw, table), digest, phase)


@dataclass(frozen=True)
class RepairAction:
    label: str
    params: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def key(self) -> str:
        return _io.dumps_line([self.label, self.params])

    def __eq__(self, other) -> bool:
        return isinstance(other, RepairAction) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def to_dict(self) -> dict:
        return {"label": self.label, "params": self.params}


@dataclass
class RepairRecord:
    signature: FailureSignature
    action: RepairAction
    scope: str
    outcomes: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.outcomes)

    @property
    def fixed(self) -> int:
        return self.outcomes.count("fixed")


class FailureMemory:
    """One scope's store, folded from an append-only JSONL file."""

    def __init__(self, path: str | Path | None, scope: str):
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}")
        self.path = Path(path) if path is not None else None
        self.scope = scope
        self._lock = threading.Lock()
        self.records: dict[tuple[str, str, str], RepairRecord] = {}
        if self.path is not None:
            for rec in _io.read_jsonl(self.path):
                self._fold(rec)

    def __len__(self) -> int:
        return len(self.records)

    def _fold(self, rec: dict) -> RepairRecord:
        sig = FailureSignature(rec["class"], rec["fingerprint"], rec.get("context", ""))
        action = RepairAction(rec["action"]["label"], rec["action"].get("params", {}))
        key = (sig.cls, sig.fingerprint, action.key)
        record = self.records.get(key)
        if record is None:
            record = self.records[key] = RepairRecord(sig, action, self.scope)
        record.outcomes.append(rec["outcome"])
        return record

    def record(self, signature: FailureSignature, action: RepairAction, outcome: str) -> RepairRecord:
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        rec = {
            "class": signature.cls,
            "fingerprint": signature.fingerprint,
            "context": signature.context,
            "action": action.to_dict(),
            "outcome": outcome,
        }
        with self._lock:
            if self.path is not None:
                _io.append_jsonl(self.path, rec)
            return self._fold(rec)

    def find(self, signature: FailureSignature) -> list[RepairRecord]:
        return [r for r in self.records.values() if r.signature.key == signature.key]


def record(memory: FailureMemory, signature: FailureSignature, action: RepairAction, outcome: str) -> RepairRecord:
    return memory.record(signature, action, outcome)


def retrieve(signature: FailureSignature, memories: FailureMemory | Sequence[FailureMemory]) -> list[RepairAction]:
    """Ranked repair candidates; an empty list means the provider must improvise.

    Exact-signature actions come first, then actions that fixed other errors
    of the same class.  Each group is ordered by fixed count, then by action
    key.  An action that has only ever failed on this exact signature is
    exhausted and never returned.
    """
    if isinstance(memories, FailureMemory):
        memories = [memories]
    exact: dict[RepairAction, list[str]] = {}
    same_class: dict[RepairAction, list[str]] = {}
    for mem in memories:
        for r in mem.records.values():
            if r.signature.cls != signature.cls:
                continue
            bucket = exact if r.signature.fingerprint == signature.fingerprint else same_class
            bucket.setdefault(r.action, []).extend(r.outcomes)
    exhausted = {a for a, outs in exact.items() if "fixed" not in outs}

    def ranked(bucket):
        usable = [(a, outs.count("fixed")) for a, outs in bucket.items() if "fixed" in outs and a not in exhausted]
        usable.sort(key=lambda item: (-item[1], item[0].key))
        return [a for a, _ in usable]

    first = ranked(exact)
    seen = set(first)
    return first + [a for a in ranked(same_class) if a not in seen]


def promote(local: FailureMemory, global_mem: FailureMemory, signature: FailureSignature, action_label: str) -> int:
    """Copy a local (signature, action) history into global memory.

    Returns the number of outcome events copied (0 when nothing matched).
    """
    copied = 0
    for r in local.find(signature):
        if r.action.label != action_label:
            continue
        for outcome in r.outcomes:
            global_mem.record(r.signature, r.action, outcome)
            copied += 1
    return copied


def memories_for(paths: Iterable[tuple[str | Path, str]]) -> list[FailureMemory]:
    return [FailureMemory(p, scope) for p, scope in paths]
