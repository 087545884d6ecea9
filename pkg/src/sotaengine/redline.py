"""Integrity rules R1-R7 evaluated against declared touch sets.

Every hypothesis declares which protected surfaces it modifies.  A rule
forbids a set of surfaces, so an audit is a set intersection and is fully
deterministic.  A semantic judge provider may add violations on top but can
never clear an idea the mechanical audit rejected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping, Protocol

from . import _io
from .errors import EngineError

logger = logging.getLogger(__name__)

GENERIC_SURFACES = (
    "metric_params",
    "eval_script",
    "model_outputs",
    "other_metrics_tradeoff",
    "train_test_split",
    "dataset_content",
)
PAPER_SPECIFIC_PREFIX = "paper_specific:"
DEFAULT_R4_TOLERANCE = Decimal("0.10")


def paper_specific(label: str) -> str:
    return PAPER_SPECIFIC_PREFIX + normalize_label(label)


def normalize_label(label: str) -> str:
    return "_".join(label.strip().lower().replace("-", " ").split())


def is_surface(value: str) -> bool:
    return value in GENERIC_SURFACES or (
        value.startswith(PAPER_SPECIFIC_PREFIX) and len(value) > len(PAPER_SPECIFIC_PREFIX)
    )


@dataclass(frozen=True)
class RedLineRule:
    id: str
    title: str
    scope: frozenset[str]
    kind: str = "generic"

    @property
    def column(self) -> str:
        """Audit-table column: paper-specific rules share the R7 column."""
        return "R7" if self.kind == "paper_specific" else self.id


GENERIC_RULES = (
    RedLineRule("R1", "Evaluation metric parameters must not change", frozenset({"metric_params"})),
    RedLineRule("R2", "Evaluation script integrity must be maintained", frozenset({"eval_script"})),
    RedLineRule("R3", "Algorithm outputs must come from real inference", frozenset({"model_outputs"})),
    RedLineRule("R4", "No unfair trade-offs between metric dimensions", frozenset({"other_metrics_tradeoff"})),
    RedLineRule("R5", "Train/test split must follow the original definition", frozenset({"train_test_split"})),
    RedLineRule("R6", "Training and test data must not be modified", frozenset({"dataset_content"})),
)
AUDIT_COLUMNS = ("R1", "R2", "R3", "R4", "R5", "R6", "R7")


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[RedLineRule, ...]
    degraded: bool = False

    def ids(self) -> list[str]:
        return [r.id for r in self.rules]

    def paper_specific(self) -> list[RedLineRule]:
        return [r for r in self.rules if r.kind == "paper_specific"]

    def with_rules(self, extra: Iterable[RedLineRule]) -> RuleSet:
        known = {r.id for r in self.rules}
        added = tuple(r for r in extra if r.id not in known)
        return RuleSet(self.rules + added, self.degraded)


def generic_rules() -> RuleSet:
    return RuleSet(GENERIC_RULES)


def r7_rule(label: str, title: str | None = None) -> RedLineRule:
    norm = normalize_label(label)
    if not norm:
        raise ValueError("empty paper-specific label")
    return RedLineRule(f"R7:{norm}", title or label, frozenset({paper_specific(norm)}), "paper_specific")


@dataclass(frozen=True)
class AuditVerdict:
    status: str  # "cleared" | "rejected"
    violated: tuple[str, ...] = ()
    rationale: str = ""

    def __post_init__(self):
        if (self.status == "rejected") != bool(self.violated):
            raise ValueError("rejected iff violations are present")

    @property
    def cleared(self) -> bool:
        return self.status == "cleared"

    def label(self) -> str:
        return "CLEARED" if self.cleared else "REJECTED (Red Line Violation)"


class ConstraintAnalyzer(Protocol):
    def constraints(self, task) -> Iterable:
        """Paper-specific constraints as labels or (label, title) pairs."""
        ...


class SemanticJudge(Protocol):
    def extra_violations(self, hypothesis, rules: RuleSet) -> Iterable[str]:
        ...


def enumerate_constraints(task, analyzer: ConstraintAnalyzer | None, analysis_path: str | Path | None = None) -> RuleSet:
    """R1-R6 plus deduplicated paper-specific R7 rules from ``analyzer``.

    Analyzer failure yields the generic set flagged ``degraded``.  When
    ``analysis_path`` is given the constraint list is written into the task's
    analysis document.
    """
    ruleset = generic_rules()
    if analyzer is not None:
        try:
            extra = []
            seen = set()
            for item in analyzer.constraints(task):
                label, title = (item, None) if isinstance(item, str) else tuple(item)
                rule = r7_rule(label, title)
                if rule.id not in seen:
                    seen.add(rule.id)
                    extra.append(rule)
            ruleset = ruleset.with_rules(extra)
        except Exception as exc:
            logger.warning("constraint analyzer failed (%s); using generic rules only", exc)
            ruleset = RuleSet(GENERIC_RULES, degraded=True)
    if analysis_path is not None:
        write_constraints_section(analysis_path, ruleset)
    return ruleset


def render_constraints(ruleset: RuleSet) -> str:
    lines = ["## Hard constraints / red lines", ""]
    for r in ruleset.rules:
        scope = ", ".join(sorted(r.scope))
        lines.append(f"- {r.id}: {r.title} [{scope}]")
    if ruleset.degraded:
        lines.append("")
        lines.append("_constraint analysis degraded: generic rules only_")
    return "\n".join(lines) + "\n"


def write_constraints_section(path: str | Path, ruleset: RuleSet) -> None:
    path = Path(path)
    marker = "## Hard constraints / red lines"
    existing = path.read_text(encoding="utf-8") if path.exists() else ""
    head = existing.split(marker, 1)[0].rstrip()
    body = (head + "\n\n" if head else "") + render_constraints(ruleset)
    _io.atomic_write_text(path, body)


def render_global_rules(ruleset: RuleSet) -> str:
    """Preamble for every provider prompt: the rules as absolute prohibitions."""
    lines = ["The following are absolute prohibitions, with no exceptions under any circumstances:"]
    lines += [f"{r.id}. {r.title}." for r in ruleset.rules]
    return "\n".join(lines) + "\n"


def audit_idea(hypothesis, ruleset: RuleSet, judge: SemanticJudge | None = None) -> AuditVerdict:
    touch = frozenset(hypothesis.touch_set)
    violated = [r.id for r in ruleset.rules if r.scope & touch]
    notes = []
    unknown = sorted(s for s in touch if not is_surface(s))
    if unknown:
        notes.append(f"undeclared surfaces ignored: {', '.join(unknown)}")
    if judge is not None:
        known = set(ruleset.ids())
        try:
            for rid in judge.extra_violations(hypothesis, ruleset):
                if rid in known and rid not in violated:
                    violated.append(rid)
                    notes.append(f"{rid} added by judge")
        except Exception as exc:
            # a failing judge cannot loosen anything; the mechanical verdict stands
            logger.warning("semantic judge failed on %s: %s", hypothesis.id, exc)
    order = {rid: i for i, rid in enumerate(ruleset.ids())}
    violated.sort(key=lambda rid: order[rid])
    if violated:
        rationale = "touches " + ", ".join(
            f"{rid} scope" for rid in violated
        )
        if notes:
            rationale += "; " + "; ".join(notes)
        return AuditVerdict("rejected", tuple(violated), rationale)
    return AuditVerdict("cleared", (), "; ".join(notes) or "no protected surface touched")


def admissibility(hypothesis, ruleset: RuleSet, judge: SemanticJudge | None = None) -> int:
    return 1 if audit_idea(hypothesis, ruleset, judge).cleared else 0


@dataclass
class AuditTable:
    verdicts: dict[str, AuditVerdict]
    ruleset: RuleSet
    order: list[str] = field(default_factory=list)

    @property
    def cleared(self) -> list[str]:
        return [i for i in self.order if self.verdicts[i].cleared]

    @property
    def rejected(self) -> list[str]:
        return [i for i in self.order if not self.verdicts[i].cleared]

    def render(self) -> str:
        lines = [
            "## Red line audit",
            "",
            "| idea | " + " | ".join(AUDIT_COLUMNS) + " | verdict |",
            "|" + "---|" * (len(AUDIT_COLUMNS) + 2),
        ]
        columns = {r.id: r.column for r in self.ruleset.rules}
        for idea_id in self.order:
            v = self.verdicts[idea_id]
            failed = {columns[rid] for rid in v.violated}
            marks = ["x" if col in failed else "ok" for col in AUDIT_COLUMNS]
            verdict = v.label()
            if v.violated:
                verdict += " " + ",".join(v.violated)
            lines.append(f"| {idea_id} | " + " | ".join(marks) + f" | {verdict} |")
        return "\n".join(lines) + "\n"


def audit_library(hypotheses: Iterable, ruleset: RuleSet, judge: SemanticJudge | None = None) -> AuditTable:
    hypotheses = list(hypotheses)
    if not hypotheses:
        raise EngineError("cannot audit an empty library")
    order = sorted((h.id for h in hypotheses), key=_id_key)
    by_id = {h.id: h for h in hypotheses}
    return AuditTable({i: audit_idea(by_id[i], ruleset, judge) for i in order}, ruleset, order)


def _id_key(idea_id: str):
    # H2 before H10
    digits = "".join(ch for ch in idea_id if ch.isdigit())
    return (idea_id.rstrip("0123456789"), int(digits) if digits else -1, idea_id)


def guard_execution(hypothesis, verdict: AuditVerdict | None) -> None:
    """Last gate before an idea is applied: it must carry a cleared verdict."""
    if verdict is None or not verdict.cleared:
        raise EngineError(f"idea {hypothesis.id} has no cleared red-line verdict")


def check_tradeoff(
    candidate: Mapping[str, Decimal],
    baseline: Mapping[str, Decimal],
    primary: str,
    directions: Mapping[str, str] | None = None,
    default_direction: str = "maximize",
    tolerance: Decimal = DEFAULT_R4_TOLERANCE,
) -> list[str]:
    """Non-primary metrics that degraded beyond ``tolerance`` relative to baseline.

    An iteration with a non-empty result may not become the new best.
    """
    directions = directions or {}
    tolerance = Decimal(str(tolerance))
    degraded = []
    for name, base in baseline.items():
        if name == primary or name not in candidate:
            continue
        base = Decimal(str(base))
        value = Decimal(str(candidate[name]))
        direction = directions.get(name, default_direction)
        loss = base - value if direction == "maximize" else value - base
        scale = abs(base)
        if scale == 0:
            if loss > 0:
                degraded.append(name)
        elif loss / scale > tolerance:
            degraded.append(name)
    return sorted(degraded)
