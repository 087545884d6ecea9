"""Hypothesis library: seeding, audit application, selection and updates."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from . import _io
from .errors import EngineError, LeapAborted, ReideationRequired
from .redline import AuditTable, AuditVerdict, RuleSet, audit_idea

logger = logging.getLogger(__name__)

IDEA_TYPES = ("PARAM", "CODE", "ALGO")
GRANULARITIES = ("micro", "meso", "macro")
RISKS = ("LOW", "MEDIUM", "HIGH")
EXECUTED = ("executed_improved", "executed_no_gain", "executed_failed")
TRANSITIONS = {
    "proposed": {"cleared", "rejected"},
    "cleared": {"in_progress"},
    "in_progress": set(EXECUTED),
    "rejected": set(),
    "executed_improved": set(),
    "executed_no_gain": set(),
    "executed_failed": set(),
}
LEAP_CANDIDATES = 3


class UnknownIdeaError(EngineError, KeyError):
    def __str__(self) -> str:
        return f"unknown idea {self.args[0]!r}"


@dataclass
class Hypothesis:
    id: str
    title: str
    type: str
    priority: int
    description: str = ""
    granularity: str = "micro"
    risk: str = "LOW"
    assumptions: str = ""
    touch_set: frozenset[str] = frozenset()
    status: str = "proposed"
    outcome_iterations: list[int] = field(default_factory=list)
    patch: dict | None = None

    def __post_init__(self):
        if self.type not in IDEA_TYPES:
            raise ValueError(f"{self.id}: unknown type {self.type!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"{self.id}: unknown granularity {self.granularity!r}")
        if self.risk not in RISKS:
            raise ValueError(f"{self.id}: unknown risk {self.risk!r}")
        if self.status not in TRANSITIONS:
            raise ValueError(f"{self.id}: unknown status {self.status!r}")
        if not isinstance(self.priority, int) or isinstance(self.priority, bool):
            raise ValueError(f"{self.id}: priority must be an integer")
        self.touch_set = frozenset(self.touch_set)

    def move(self, status: str) -> None:
        if status not in TRANSITIONS[self.status]:
            raise EngineError(f"{self.id}: {self.status} -> {status} not allowed")
        self.status = status

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "description": self.description,
            "type": self.type,
            "granularity": self.granularity,
            "priority": self.priority,
            "risk": self.risk,
            "assumptions": self.assumptions,
            "touch_set": sorted(self.touch_set),
            "status": self.status,
            "outcome_iterations": list(self.outcome_iterations),
            "patch": self.patch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Hypothesis:
        d = dict(d)
        d["touch_set"] = frozenset(d.get("touch_set", ()))
        d["outcome_iterations"] = list(d.get("outcome_iterations", ()))
        return cls(**d)


@dataclass(frozen=True)
class AlignmentReport:
    metric_aligned: bool
    implementation_aligned: bool
    constraint_aligned: bool
    lever_identified: bool
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.metric_aligned and self.implementation_aligned and self.constraint_aligned and self.lever_identified

    def failures(self) -> list[str]:
        names = ("metric_aligned", "implementation_aligned", "constraint_aligned", "lever_identified")
        return [n for n in names if not getattr(self, n)]


ALIGNED = AlignmentReport(True, True, True, True)


class Ideator(Protocol):
    def propose(self, task, count: int, round: int) -> Sequence:
        """Proposals as Hypothesis or (Hypothesis, AlignmentReport) pairs."""
        ...

    def leap_candidates(self, history, library: IdeaLibrary, count: int) -> Sequence[Hypothesis]:
        ...


# -- library ------------------------------------------------------------------


class IdeaLibrary:
    def __init__(self, ideas: Iterable[Hypothesis] = (), meta: dict | None = None, degraded: bool = False):
        self.ideas: dict[str, Hypothesis] = {}
        self.meta = dict(meta or {})
        self.degraded = degraded
        self.verdicts: dict[str, AuditVerdict] = {}
        self.audit_table: AuditTable | None = None
        for h in ideas:
            self.add(h)

    def __len__(self) -> int:
        return len(self.ideas)

    def __contains__(self, idea_id: str) -> bool:
        return idea_id in self.ideas

    def __eq__(self, other) -> bool:
        if not isinstance(other, IdeaLibrary):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.degraded == other.degraded
            and [h.to_dict() for h in self.ordered()] == [h.to_dict() for h in other.ordered()]
        )

    def add(self, h: Hypothesis) -> None:
        if h.id in self.ideas:
            raise ValueError(f"duplicate idea id {h.id}")
        self.ideas[h.id] = h

    def get(self, idea_id: str) -> Hypothesis:
        try:
            return self.ideas[idea_id]
        except KeyError:
            raise UnknownIdeaError(idea_id) from None

    def ordered(self) -> list[Hypothesis]:
        return sorted(self.ideas.values(), key=lambda h: (h.priority, h.id))

    def with_status(self, *statuses: str) -> list[Hypothesis]:
        return [h for h in self.ordered() if h.status in statuses]

    def cleared(self) -> list[Hypothesis]:
        return self.with_status("cleared")

    def apply_audit(self, table: AuditTable) -> None:
        """Move proposed ideas to cleared/rejected per the audit table."""
        self.audit_table = table
        for idea_id, verdict in table.verdicts.items():
            h = self.get(idea_id)
            self.verdicts[idea_id] = verdict
            if h.status == "proposed":
                h.move("cleared" if verdict.cleared else "rejected")

    # -- document

    def render(self) -> str:
        lines = ["# Idea library", "", "meta: " + json.dumps(
            {"degraded": self.degraded, **self.meta}, sort_keys=True, ensure_ascii=False
        )]
        for h in self.ordered():
            lines.append("")
            lines.append(f"## {h.id}")
            for key, value in h.to_dict().items():
                if key != "id":
                    lines.append(f"- {key}: {json.dumps(value, sort_keys=True, ensure_ascii=False)}")
        text = "\n".join(lines) + "\n"
        if self.audit_table is not None:
            text += "\n" + self.audit_table.render()
        return text

    @classmethod
    def parse(cls, text: str) -> IdeaLibrary:
        meta: dict = {}
        ideas = []
        current: dict | None = None
        for line in text.splitlines():
            if line.startswith("## Red line audit"):
                break
            if line.startswith("meta: "):
                meta = json.loads(line[len("meta: "):])
            elif line.startswith("## "):
                if current is not None:
                    ideas.append(Hypothesis.from_dict(current))
                current = {"id": line[3:].strip()}
            elif line.startswith("- ") and current is not None:
                key, _, raw = line[2:].partition(": ")
                current[key] = json.loads(raw)
        if current is not None:
            ideas.append(Hypothesis.from_dict(current))
        degraded = meta.pop("degraded", False)
        return cls(ideas, meta, degraded)

    def save(self, path: str | Path) -> None:
        _io.atomic_write_text(path, self.render())

    @classmethod
    def load(cls, path: str | Path) -> IdeaLibrary:
        return cls.parse(Path(path).read_text(encoding="utf-8"))


# -- operations ----------------------------------------------------------------


def _split_proposal(item) -> tuple[Hypothesis, AlignmentReport]:
    if isinstance(item, Hypothesis):
        return item, ALIGNED
    h, report = item
    return h, report


def seed_library(
    ideator: Ideator,
    task,
    min_count: int = 10,
    max_rounds: int = 3,
    meta: dict | None = None,
    first_round: int = 0,
) -> IdeaLibrary:
    """Collect at least ``min_count`` aligned hypotheses from ``ideator``.

    Misaligned proposals are dropped.  If the provider still falls short after
    ``max_rounds`` requests the library is returned flagged ``degraded``.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    lib = IdeaLibrary(meta=meta)
    for rnd in range(first_round, first_round + max_rounds):
        missing = min_count - len(lib)
        if missing <= 0:
            break
        try:
            proposals = list(ideator.propose(task, missing, rnd))
        except Exception as exc:
            logger.warning("ideator failed in round %d: %s", rnd, exc)
            continue
        for item in proposals:
            h, report = _split_proposal(item)
            if not report.passed:
                logger.info("idea %s excluded: %s", h.id, ", ".join(report.failures()))
                continue
            if h.id in lib:
                logger.info("idea %s proposed twice; keeping the first", h.id)
                continue
            lib.add(replace(h, status="proposed", outcome_iterations=[]))
    if len(lib) < min_count:
        logger.warning("library has %d ideas, wanted %d; flagged degraded", len(lib), min_count)
        lib.degraded = True
    return lib


def select_next(library: IdeaLibrary, history: Sequence, path: str = "normal", low_window: int = 2) -> Hypothesis:
    """Highest-priority cleared idea, escalating risk after a run of LOW executions.

    ``history`` holds ledger entries (or anything with ``idea_id``) in
    execution order; their risks are looked up in the library.
    """
    if path != "normal":
        raise ValueError("select_next serves the normal path only")
    cleared = library.cleared()
    if not cleared:
        raise ReideationRequired("no cleared, unexecuted idea left")
    executed = [e for e in history if getattr(e, "idea_id", None) is not None]
    recent = executed[-low_window:] if low_window > 0 else []
    if low_window > 0 and len(recent) == low_window:
        risks = [library.ideas[e.idea_id].risk if e.idea_id in library else None for e in recent]
        if all(r == "LOW" for r in risks):
            bolder = [h for h in cleared if h.risk in ("MEDIUM", "HIGH")]
            if bolder:
                return bolder[0]
    return cleared[0]


def outcome_status(entry) -> str:
    if entry.status == "crashed":
        return "executed_failed"
    if entry.is_best:
        return "executed_improved"
    return "executed_no_gain"


def update_after_iteration(library: IdeaLibrary, entry, leap_idea: Hypothesis | None = None) -> dict:
    """Fold one ledger entry into the library; returns a small delta record."""
    added = False
    if entry.idea_id not in library:
        if leap_idea is None or leap_idea.id != entry.idea_id:
            raise UnknownIdeaError(entry.idea_id)
        library.add(leap_idea)
        added = True
    h = library.get(entry.idea_id)
    if h.status == "cleared":
        h.move("in_progress")
    new_status = outcome_status(entry)
    if h.status == "in_progress":
        h.move(new_status)
    elif h.status not in EXECUTED:
        raise EngineError(f"{h.id} is {h.status}; it cannot have been executed")
    h.outcome_iterations.append(entry.iteration)
    return {"idea_id": h.id, "status": h.status, "added": added, "iteration": entry.iteration}


@dataclass(frozen=True)
class LeapCandidateLog:
    hypothesis: Hypothesis
    verdict: AuditVerdict | None
    accepted: bool
    reason: str


def synthesize_leap(ideator: Ideator, history, library: IdeaLibrary, ruleset: RuleSet, judge=None):
    """Audit up to three provider candidates; return (idea, log) for the first cleared.

    PARAM-typed candidates are malformed leap output and rejected outright.
    Raises :class:`LeapAborted` (carrying the log) when nothing clears.
    """
    candidates = list(ideator.leap_candidates(history, library, LEAP_CANDIDATES))[:LEAP_CANDIDATES]
    log: list[LeapCandidateLog] = []
    chosen = None
    for cand in candidates:
        if cand.type == "PARAM":
            log.append(LeapCandidateLog(cand, None, False, "malformed leap candidate: PARAM type"))
            continue
        if cand.id in library:
            log.append(LeapCandidateLog(cand, None, False, f"id {cand.id} already in library"))
            continue
        verdict = audit_idea(cand, ruleset, judge)
        ok = verdict.cleared and chosen is None
        log.append(LeapCandidateLog(cand, verdict, ok, verdict.rationale))
        if ok:
            chosen = replace(cand, status="cleared", outcome_iterations=[])
            library.verdicts[cand.id] = verdict
    for item in log:
        logger.info("leap candidate %s: %s", item.hypothesis.id, item.reason)
    if chosen is None:
        exc = LeapAborted("all leap candidates rejected")
        exc.log = log
        raise exc
    return chosen, log
