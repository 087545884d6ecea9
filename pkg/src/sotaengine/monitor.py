"""External supervision of a task trace, plus the task's memory documents.

The monitor never touches the workspace.  Its only output is a
:class:`SupervisoryAction`, which the loop or the scheduler carries out.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from . import _io
from .failure import mask
from .vcs import SnapshotStore

logger = logging.getLogger(__name__)

EVENT_KINDS = ("assistant_output", "tool_invocation", "execution_result", "termination_signal")
PHASES = ("setup", "install", "launch", "evaluate", "report", "failure_handling")
ACTION_KINDS = ("continue_", "resume_with_guidance", "fallback", "terminate", "rollback")
DOC_NAMES = ("code_analysis.md", "idea_library.md", "research_report.md")

GUIDANCE_FAILURE_SKILL = "consult failure-handling skill"
FALLBACK_MANUAL_ENV = "manual environment path"


@dataclass(frozen=True)
class TraceEvent:
    timestamp: float
    kind: str
    digest: str
    success: bool | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    @classmethod
    def of(cls, timestamp: float, kind: str, payload: str, success: bool | None = None) -> TraceEvent:
        return cls(timestamp, kind, mask(payload), success)

    def to_dict(self) -> dict:
        return {"record": "event", "ts": self.timestamp, "kind": self.kind, "digest": self.digest, "success": self.success}


@dataclass(frozen=True)
class SupervisoryAction:
    kind: str
    argument: str = ""
    reason: str = ""

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action {self.kind!r}")
        if self.kind in ("terminate", "rollback") and not self.reason:
            raise ValueError(f"{self.kind} needs a reason")

    def to_dict(self) -> dict:
        return {"record": "action", "kind": self.kind, "argument": self.argument, "reason": self.reason}


CONTINUE = SupervisoryAction("continue_")


class TraceLog:
    """Append-only ``trace.jsonl`` with strictly increasing event timestamps."""

    def __init__(self, path: str | Path | None, clock: Callable[[], float] = time.time):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.events: list[TraceEvent] = []
        self.actions: list[tuple[float, SupervisoryAction]] = []
        self.notes: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None:
            for rec in _io.read_jsonl(self.path):
                self._fold(rec)

    def _fold(self, rec: dict) -> None:
        kind = rec.get("record")
        if kind == "event":
            self.events.append(TraceEvent(rec["ts"], rec["kind"], rec["digest"], rec.get("success")))
        elif kind == "action":
            self.actions.append((rec.get("ts", 0.0), SupervisoryAction(rec["kind"], rec.get("argument", ""), rec.get("reason", ""))))
        else:
            self.notes.append(rec)

    def _next_ts(self) -> float:
        ts = float(self.clock())
        if self.events and ts <= self.events[-1].timestamp:
            ts = self.events[-1].timestamp + 1e-6
        return ts

    def emit(self, kind: str, payload: str, success: bool | None = None) -> TraceEvent:
        with self._lock:
            ev = TraceEvent.of(self._next_ts(), kind, payload, success)
            self.events.append(ev)
            if self.path is not None:
                _io.append_jsonl(self.path, ev.to_dict())
            return ev

    def record_action(self, action: SupervisoryAction) -> None:
        with self._lock:
            ts = self.events[-1].timestamp if self.events else float(self.clock())
            self.actions.append((ts, action))
            if self.path is not None:
                rec = action.to_dict()
                rec["ts"] = ts
                _io.append_jsonl(self.path, rec)

    def note(self, what: str, **data) -> None:
        """Free-form structured record (phase changes, audit verdicts, ...)."""
        rec = {"record": "note", "what": what, **data}
        with self._lock:
            self.notes.append(rec)
            if self.path is not None:
                _io.append_jsonl(self.path, rec)


# -- phase classification -------------------------------------------------------------


@dataclass(frozen=True)
class PatternTable:
    phases: tuple[tuple[str, tuple[str, ...]], ...]
    default_phase: str = "setup"

    @classmethod
    def load(cls, path: str | Path | None = None) -> PatternTable:
        if path is None:
            raw = resources.files("sotaengine").joinpath("data/monitor_patterns.json").read_text(encoding="utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
        data = json.loads(raw)
        phases = tuple((name, tuple(p.lower() for p in pats)) for name, pats in data["phases"])
        for name, _ in phases:
            if name not in PHASES:
                raise ValueError(f"unknown phase {name!r} in pattern table")
        return cls(phases, data.get("default_phase", "setup"))

    def match(self, digest: str) -> str | None:
        text = digest.lower()
        for name, patterns in self.phases:
            if any(p in text for p in patterns):
                return name
        return None


_DEFAULT_TABLE: PatternTable | None = None


def default_pattern_table() -> PatternTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = PatternTable.load()
    return _DEFAULT_TABLE


def classify_phase(window: Sequence[TraceEvent], table: PatternTable | None = None, last_phase: str | None = None) -> str:
    """Majority phase among pattern matches in ``window``; sticky when nothing matches."""
    if not window:
        raise ValueError("empty window")
    table = table or default_pattern_table()
    votes = Counter(p for p in (table.match(ev.digest) for ev in window) if p is not None)
    if not votes:
        return last_phase or table.default_phase
    order = {name: i for i, (name, _) in enumerate(table.phases)}
    return min(votes, key=lambda p: (-votes[p], order[p]))


# -- stagnation --------------------------------------------------------------------


@dataclass(frozen=True)
class StagnationPolicy:
    repeat_n: int = 3
    no_transition_m: int = 5
    no_progress_seconds: float | None = None


@dataclass(frozen=True)
class Indicators:
    kinds: frozenset[str]
    repeated_digest: str | None = None

    def __contains__(self, kind: str) -> bool:
        return kind in self.kinds

    def __bool__(self) -> bool:
        return bool(self.kinds)


def _repeat_digest(failed: list[str], n: int) -> str | None:
    counts = Counter(failed)
    hits = [d for d in failed if counts[d] >= n]
    if hits:
        return hits[-1]
    # two fixes oscillating: A B A B ... with each pair seen n times
    pairs = Counter(tuple(sorted(p)) for p in zip(failed, failed[1:]) if p[0] != p[1])
    cycling = [p for p, c in pairs.items() if c >= n]
    if cycling:
        return " | ".join(cycling[0])
    return None


def detect_stagnation(trace: Sequence[TraceEvent], policy: StagnationPolicy = StagnationPolicy()) -> Indicators:
    """Pure function of (trace, policy)."""
    if not trace:
        raise ValueError("empty trace")
    kinds = set()
    last_success = max((i for i, ev in enumerate(trace) if ev.kind == "execution_result" and ev.success), default=-1)
    since = trace[last_success + 1:]
    failed = [ev.digest for ev in since if ev.success is False]
    repeated = _repeat_digest(failed, policy.repeat_n)
    if repeated is not None:
        kinds.add("repeat_failed_action")
    if sum(1 for ev in since if ev.kind == "tool_invocation") >= policy.no_transition_m:
        kinds.add("no_transition")
    if policy.no_progress_seconds is not None:
        anchor = trace[last_success].timestamp if last_success >= 0 else trace[0].timestamp
        if trace[-1].timestamp - anchor >= policy.no_progress_seconds:
            kinds.add("no_progress_window")
    return Indicators(frozenset(kinds), repeated)


# -- supervision -------------------------------------------------------------------


@dataclass
class Budget:
    wall_clock_limit: float | None = None
    rounds_limit: int | None = None
    started_at: float = 0.0
    rounds_consumed: int = 0

    def elapsed(self, now: float) -> float:
        return now - self.started_at

    def exceeded(self, now: float) -> str | None:
        if self.wall_clock_limit is not None and self.elapsed(now) >= self.wall_clock_limit:
            return "budget: wall clock"
        if self.rounds_limit is not None and self.rounds_consumed >= self.rounds_limit:
            return "budget: rounds"
        return None


@dataclass
class MonitorState:
    last_phase: str | None = None
    guided: set[str] = field(default_factory=set)
    fallen_back: set[str] = field(default_factory=set)
    terminated: bool = False
    best_snapshot: str | None = None
    window: int = 8


def supervise(
    trace: TraceLog,
    state: MonitorState,
    budget: Budget,
    now: float | None = None,
    regression: bool = False,
    policy: StagnationPolicy = StagnationPolicy(),
    table: PatternTable | None = None,
) -> tuple[str, SupervisoryAction]:
    """One supervision step; non-continue actions are appended to the trace."""
    now = trace.clock() if now is None else now
    events = trace.events
    phase = classify_phase(events[-state.window:], table, state.last_phase) if events else (state.last_phase or "setup")
    state.last_phase = phase
    action = CONTINUE
    reason = budget.exceeded(now)
    if state.terminated:
        action = CONTINUE
    elif reason:
        action = SupervisoryAction("terminate", "", reason)
        state.terminated = True
    elif regression and state.best_snapshot:
        action = SupervisoryAction("rollback", state.best_snapshot, "severe regression flagged by the loop")
    elif events:
        ind = detect_stagnation(events, policy)
        if "repeat_failed_action" in ind and phase in ("install", "failure_handling"):
            key = ind.repeated_digest or ""
            if key not in state.guided:
                state.guided.add(key)
                action = SupervisoryAction("resume_with_guidance", GUIDANCE_FAILURE_SKILL, f"repeated failure: {key}")
            elif key not in state.fallen_back:
                state.fallen_back.add(key)
                action = SupervisoryAction("fallback", FALLBACK_MANUAL_ENV, f"repeated failure after guidance: {key}")
        elif ind:
            key = ",".join(sorted(ind.kinds)) + "|" + (ind.repeated_digest or "")
            if key not in state.guided:
                state.guided.add(key)
                action = SupervisoryAction("resume_with_guidance", "stagnation: " + ",".join(sorted(ind.kinds)), key)
    if action.kind != "continue_":
        trace.record_action(action)
        logger.info("supervisor: %s %s (%s)", action.kind, action.argument, action.reason)
    return phase, action


# -- memory documents -----------------------------------------------------------------


_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+\.md$")


class MemoryDocs:
    """Whole-file atomic documents, each write versioned as a docs-tree snapshot."""

    def __init__(self, docs_dir: str | Path, history_dir: str | Path):
        self.docs_dir = Path(docs_dir)
        self.docs_dir.mkdir(parents=True, exist_ok=True)
        self.history_dir = Path(history_dir)
        self.history_path = self.history_dir / "history.jsonl"

    def _path(self, name: str) -> Path:
        if not _NAME_RE.match(name):
            raise ValueError(f"bad document name {name!r}")
        return self.docs_dir / name

    def read(self, name: str) -> str:
        try:
            return self._path(name).read_text(encoding="utf-8")
        except FileNotFoundError:
            return ""

    def write(self, name: str, text: str) -> str:
        _io.atomic_write_text(self._path(name), text)
        digest = SnapshotStore(self.history_dir).capture(self.docs_dir)
        _io.append_jsonl(self.history_path, {"doc": name, "snapshot": digest})
        return digest

    def history(self) -> list[dict]:
        return _io.read_jsonl(self.history_path)


def memory_docs(task_dir: str | Path) -> MemoryDocs:
    task_dir = Path(task_dir)
    return MemoryDocs(task_dir / "docs", task_dir / "docs_history")
