"""Per-task optimization state machine (phases P0 to P4).

P0 measures and tags the baseline, P1 writes the code analysis and the
red-line set, P2 seeds and audits the idea library, P3 iterates, and P4
restores ``_best``, re-evaluates and exports the result bundle.

Within P3 a run of ``leap_window`` PARAM-type iterations forces a leap: a
structural idea is synthesized and its state is kept for a honeymoon of
non-improving iterations before the workspace returns to the pre-leap best.
The leap iteration itself counts toward the honeymoon, so with the default
length of five, a leap at iteration 6 followed by non-improving iterations
7 to 11 rolls back after iteration 11.
"""

from __future__ import annotations

import logging
import shutil
import time
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

from . import _io
from .errors import EngineError, LeapAborted, PatchConflict, PlanHalted, ReideationRequired
from .failure import FailureMemory, normalize, retrieve
from .harness import EvalResult, SimPlanner, apply_modification, plan_initialization
from .ideas import IdeaLibrary, seed_library, select_next, synthesize_leap, update_after_iteration
from .monitor import Budget, MonitorState, TraceLog, memory_docs, supervise
from .redline import (
    DEFAULT_R4_TOLERANCE,
    audit_library,
    check_tradeoff,
    enumerate_constraints,
    guard_execution,
    render_constraints,
)
from .vcs import BEST_TAG, LedgerEntry, SnapshotStore, WorkspaceVCS, better, parse_ledger, to_decimal, validate_ledger

logger = logging.getLogger(__name__)

PHASES = ("P0", "P1", "P2", "P3", "P4", "done")


class TaskFailed(EngineError):
    pass


@dataclass
class LoopConfig:
    max_iterations: int = 20
    success_threshold: Decimal | None = None
    debug_budget: int = 2
    leap_window: int = 3
    honeymoon_length: int = 5
    metric_direction: str = "maximize"
    primary_metric: str = "score"
    min_ideas: int = 10
    eval_timeout: float = 10.0
    final_tolerance: Decimal = Decimal(0)
    r4_tolerance: Decimal = DEFAULT_R4_TOLERANCE
    metric_directions: dict = field(default_factory=dict)
    regression_threshold: Decimal | None = None
    wall_clock_limit: float | None = None

    def __post_init__(self):
        if self.leap_window < 1:
            raise ValueError("leap_window must be >= 1")
        if self.honeymoon_length < 0:
            raise ValueError("honeymoon_length must be >= 0")
        if self.max_iterations < 0 or self.debug_budget < 0:
            raise ValueError("max_iterations and debug_budget must be >= 0")
        if self.metric_direction not in ("maximize", "minimize"):
            raise ValueError(f"unknown direction {self.metric_direction!r}")
        if self.success_threshold is not None:
            self.success_threshold = to_decimal(self.success_threshold)
        self.final_tolerance = to_decimal(self.final_tolerance)
        self.r4_tolerance = to_decimal(self.r4_tolerance)


@dataclass
class LeapState:
    entered_at: int
    pre_leap_snapshot: str
    pre_leap_value: Decimal
    non_improving: int = 0


@dataclass
class LoopState:
    phase: str = "P0"
    iteration: int = 0
    best_snapshot: str | None = None
    best_value: Decimal | None = None
    leap: LeapState | None = None
    blocked: bool = False
    reideated: bool = False
    stop_reason: str | None = None
    final: dict | None = None

    def to_dict(self) -> dict:
        leap = None
        if self.leap is not None:
            leap = {
                "entered_at": self.leap.entered_at,
                "pre_leap_snapshot": self.leap.pre_leap_snapshot,
                "pre_leap_value": str(self.leap.pre_leap_value),
                "non_improving": self.leap.non_improving,
            }
        return {
            "phase": self.phase,
            "iteration": self.iteration,
            "best_snapshot": self.best_snapshot,
            "best_value": None if self.best_value is None else str(self.best_value),
            "leap": leap,
            "blocked": self.blocked,
            "reideated": self.reideated,
            "stop_reason": self.stop_reason,
            "final": self.final,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LoopState:
        leap = d.get("leap")
        return cls(
            phase=d["phase"],
            iteration=d["iteration"],
            best_snapshot=d.get("best_snapshot"),
            best_value=None if d.get("best_value") is None else Decimal(d["best_value"]),
            leap=None if leap is None else LeapState(
                leap["entered_at"], leap["pre_leap_snapshot"], Decimal(leap["pre_leap_value"]), leap["non_improving"]
            ),
            blocked=d.get("blocked", False),
            reideated=d.get("reideated", False),
            stop_reason=d.get("stop_reason"),
            final=d.get("final"),
        )


def decide_path(types: Sequence[str | None], leap_window: int = 3) -> str:
    """``leap`` iff the last ``leap_window`` executed ideas were all PARAM."""
    if leap_window < 1:
        raise ValueError("leap_window must be >= 1")
    window = list(types)[-leap_window:]
    if len(window) == leap_window and all(t == "PARAM" for t in window):
        return "leap"
    return "normal"


def honeymoon_tick(leap: LeapState, improved: bool, honeymoon_length: int) -> str:
    if improved:
        return "exit_leap_improved"
    leap.non_improving += 1
    if leap.non_improving > honeymoon_length:
        return "rollback_to_pre_leap"
    return "continue_leap"


def meets_threshold(value: Decimal | None, threshold: Decimal | None, direction: str) -> bool:
    if value is None or threshold is None:
        return False
    return value >= threshold if direction == "maximize" else value <= threshold


@dataclass
class TaskPaths:
    run_dir: Path
    snapshot_dir: Path

    @property
    def workspace(self) -> Path:
        return self.run_dir / "workspace"

    @property
    def scores(self) -> Path:
        return self.run_dir / "scores.jsonl"

    @property
    def loop_state(self) -> Path:
        return self.run_dir / "loop_state.json"

    @property
    def plan(self) -> Path:
        return self.run_dir / "init_plan.json"

    @property
    def trace(self) -> Path:
        return self.run_dir / "trace.jsonl"

    @property
    def local_memory(self) -> Path:
        return self.run_dir / "failure_memory_local.jsonl"

    @property
    def provenance(self) -> Path:
        return self.run_dir / "provenance.jsonl"


@dataclass
class LoopOutcome:
    seq: int
    stage: str  # finalized | failed
    best_value: Decimal | None
    iterations: int
    stop_reason: str | None
    bundle: Path | None = None
    warning: str | None = None


class OptimizationLoop:
    def __init__(
        self,
        task,
        paths: TaskPaths,
        config: LoopConfig,
        backend,
        ideator,
        analyzer=None,
        planner=None,
        judge=None,
        improviser=None,
        global_memory: FailureMemory | None = None,
        devices: Sequence[int] = (),
        clock: Callable[[], float] = time.time,
    ):
        self.task = task
        self.paths = paths
        self.config = config
        self.backend = backend
        self.ideator = ideator
        self.analyzer = analyzer
        self.planner = planner or SimPlanner(paths.workspace)
        self.judge = judge
        self.improviser = improviser
        self.devices = tuple(devices)
        self.clock = clock
        self.trace = TraceLog(paths.trace, clock)
        self.docs = memory_docs(paths.run_dir)
        self.local_memory = FailureMemory(paths.local_memory, "local")
        self.memories = [self.local_memory] + ([global_memory] if global_memory is not None else [])
        self.state = LoopState()
        self.vcs: WorkspaceVCS | None = None
        self.sandbox = None
        self.entry = None
        self.rules = None
        self.library: IdeaLibrary | None = None
        self.baseline_metrics: dict[str, Decimal] = {}
        self.monitor_state = MonitorState()
        self.budget = Budget(config.wall_clock_limit, None, clock())

    # -- bookkeeping

    @property
    def seq(self) -> int:
        return self.task.seq

    def _persist(self) -> None:
        _io.atomic_write_json(self.paths.loop_state, self.state.to_dict())

    def _enter(self, phase: str) -> None:
        self.state.phase = phase
        self.trace.note("phase", phase=phase)
        self._persist()

    def _save_library(self) -> None:
        self.docs.write("idea_library.md", self.library.render())

    def _evaluate(self) -> EvalResult:
        argv = " ".join(self.entry.argv)
        self.trace.emit("tool_invocation", f"evaluate: {argv}")
        result = self.backend.run_evaluation(self.sandbox, self.entry, self.config.eval_timeout)
        payload = "evaluation ok" if result.ok else f"evaluation {result.exit}: {result.trace_tail or result.reason}"
        self.trace.emit("execution_result", payload, result.ok)
        return result

    # -- driver

    def run(self, out_dir: str | Path | None = None) -> LoopOutcome:
        try:
            self.run_phase0()
            self.run_phase1()
            self.run_phase2()
            self._enter("P3")
            while not self._should_stop():
                self.run_iteration()
            return self.finalize(out_dir)
        except TaskFailed as exc:
            logger.error("task %s failed in %s: %s", self.seq, self.state.phase, exc)
            self.state.stop_reason = f"failed: {exc}"
            self._persist()
            return LoopOutcome(self.seq, "failed", self.state.best_value, self.state.iteration, self.state.stop_reason)
        finally:
            if self.sandbox is not None:
                self.backend.pool.close(self.sandbox)
                self.sandbox = None

    def _should_stop(self) -> bool:
        cfg = self.config
        if self.state.blocked:
            self.state.stop_reason = "blocked"
        elif meets_threshold(self.state.best_value, cfg.success_threshold, cfg.metric_direction):
            self.state.stop_reason = "threshold"
        elif self.state.iteration >= cfg.max_iterations:
            self.state.stop_reason = "max_iterations"
        elif self.monitor_state.terminated:
            self.state.stop_reason = "terminated"
        else:
            return False
        self._persist()
        return True

    # -- phases

    def run_phase0(self) -> LedgerEntry:
        self._enter("P0")
        try:
            plan = plan_initialization(
                self.task, self.planner, self.paths.plan,
                on_failure=lambda stage, exc: self.trace.emit("termination_signal", f"plan halted at {stage}: {exc}", False),
            )
        except PlanHalted as exc:
            raise TaskFailed(str(exc)) from exc
        self.entry = plan.entry_commands[0]
        self.vcs = WorkspaceVCS(self.paths.workspace, self.paths.snapshot_dir, self.paths.scores, self.config.metric_direction)
        digest = self.vcs.init_baseline()
        self.sandbox = self.backend.pool.open(self.seq, self.paths.workspace, self.devices)
        result = self._evaluate()
        if not result.ok:
            raise TaskFailed(f"baseline evaluation {result.exit}: {result.reason}")
        entry = LedgerEntry(
            iteration=0,
            path="baseline",
            pre_snapshot=digest,
            post_snapshot=digest,
            primary_value=result.primary_value,
            metrics=result.metrics,
            is_best=True,
        )
        self.vcs.record_score(entry)
        self.baseline_metrics = dict(result.metrics)
        self.state.best_snapshot = digest
        self.state.best_value = result.primary_value
        self.monitor_state.best_snapshot = digest
        self._persist()
        return entry

    def run_phase1(self):
        self._enter("P1")
        if self.analyzer is None:
            analysis = {"pipeline": "", "entry_points": [" ".join(self.entry.argv)], "runtime_estimate": "unknown"}
        else:
            try:
                analysis = self.analyzer.analyze(self.task, self.paths.workspace)
            except Exception as exc:
                raise TaskFailed(f"analysis provider failed: {exc}") from exc
        self.rules = enumerate_constraints(self.task, self.analyzer)
        lines = ["# Code analysis", "", "## Pipeline", "", str(analysis.get("pipeline", "")), "", "## Entry points", ""]
        lines += [f"- {e}" for e in analysis.get("entry_points", [])]
        lines += ["", "## Runtime estimate", "", str(analysis.get("runtime_estimate", "unknown"))]
        if analysis.get("parameters"):
            lines += ["", "## Tunable parameters", ""] + [f"- {p}" for p in analysis["parameters"]]
        self.docs.write("code_analysis.md", "\n".join(lines) + "\n\n" + render_constraints(self.rules))
        self._persist()
        return self.rules

    def _audit(self) -> None:
        table = audit_library(self.library.ideas.values(), self.rules, self.judge)
        self.library.apply_audit(table)
        for idea_id in table.order:
            v = table.verdicts[idea_id]
            self.trace.note("audit", idea=idea_id, status=v.status, violated=list(v.violated))

    def run_phase2(self) -> IdeaLibrary:
        self._enter("P2")
        meta = {"seq": self.seq, "metric": self.config.primary_metric}
        self.library = seed_library(self.ideator, self.task, self.config.min_ideas, meta=meta)
        if len(self.library):
            self._audit()
        if not self.library.cleared():
            self._reideate()
        self._save_library()
        self._persist()
        return self.library

    def _reideate(self) -> None:
        if self.state.reideated:
            self.state.blocked = True
            return
        self.state.reideated = True
        extra = seed_library(self.ideator, self.task, self.config.min_ideas, max_rounds=1, first_round=1)
        for h in extra.ordered():
            if h.id not in self.library:
                self.library.add(h)
        if len(self.library):
            self._audit()
        if not self.library.cleared():
            self.state.blocked = True
        self.trace.note("reideation", cleared=len(self.library.cleared()), blocked=self.state.blocked)

    # -- P3

    def _pick(self, it: int, history: list[LedgerEntry]):
        path = "normal"
        if self.state.leap is None:
            types = [e.idea_type for e in history]
            path = decide_path(types, self.config.leap_window)
        if path == "leap":
            try:
                idea, log = synthesize_leap(self.ideator, history, self.library, self.rules, self.judge)
                self.trace.note("leap", iteration=it, candidates=[
                    {"id": c.hypothesis.id, "accepted": c.accepted, "reason": c.reason} for c in log
                ])
                return idea, "leap"
            except LeapAborted as exc:
                self.trace.note("leap_aborted", iteration=it, candidates=[
                    {"id": c.hypothesis.id, "reason": c.reason} for c in getattr(exc, "log", [])
                ])
        try:
            return select_next(self.library, history, "normal"), "normal"
        except ReideationRequired:
            self._reideate()
            self._save_library()
            if self.state.blocked:
                return None, "normal"
            try:
                return select_next(self.library, history, "normal"), "normal"
            except ReideationRequired:
                self.state.blocked = True
                return None, "normal"

    def _debug(self, result: EvalResult) -> EvalResult:
        attempts = 0
        tried: set[str] = set()
        while not result.ok and attempts < self.config.debug_budget:
            sig = normalize(result.trace_tail or result.reason or result.exit, "evaluate")
            candidates = [a for a in retrieve(sig, self.memories) if a.key not in tried]
            self.trace.note("retrieve", signature=str(sig), candidates=[a.label for a in candidates])
            action = candidates[0] if candidates else None
            if action is None and self.improviser is not None:
                action = self.improviser.improvise(sig, result, tried)
                if action is not None:
                    self.trace.note("improvise", signature=str(sig), action=action.label)
            if action is None:
                break
            tried.add(action.key)
            attempts += 1
            self.trace.emit("tool_invocation", f"repair: {action.label}")
            applied = self.backend.repair(self.sandbox, action)
            new = self._evaluate()
            outcome = "fixed" if new.ok else "no_effect"
            if applied and not new.ok and new.exit != result.exit:
                outcome = "worsened"
            self.local_memory.record(sig, action, outcome)
            result = new
        return result

    def run_iteration(self) -> LedgerEntry | None:
        cfg = self.config
        vcs = self.vcs
        history = vcs.ledger.entries[1:]
        it = vcs.ledger.next_iteration
        idea, path = self._pick(it, history)
        if idea is None:
            self._persist()
            return None
        guard_execution(idea, self.library.verdicts.get(idea.id))
        if path == "leap":
            self.state.leap = LeapState(it, self.state.best_snapshot, self.state.best_value)
        else:
            idea.move("in_progress")
        self.trace.note("execute", iteration=it, idea=idea.id, path=path)

        pre = vcs.snapshot()
        result = None
        note = None
        try:
            self.trace.emit("tool_invocation", f"apply: {idea.id}")
            apply_modification(self.paths.workspace, idea.patch, idea.id, self.paths.provenance)
            result = self._debug(self._evaluate())
            if not result.ok:
                note = f"{result.exit}: {result.reason}"
        except PatchConflict as exc:
            note = f"patch conflict: {exc}"
        except Exception as exc:
            logger.exception("iteration %d of task %s raised", it, self.seq)
            note = f"unhandled: {exc}"
            result = None

        if result is None or not result.ok:
            vcs.rollback(pre)
            status, value, metrics, post = "crashed", None, {}, None
        else:
            status, value, metrics = "ok", result.primary_value, dict(result.metrics)
            post = vcs.snapshot()

        improved = value is not None and better(cfg.metric_direction, value, self.state.best_value)
        if improved:
            degraded = check_tradeoff(
                metrics, self.baseline_metrics, cfg.primary_metric,
                cfg.metric_directions, cfg.metric_direction, cfg.r4_tolerance,
            )
            if degraded:
                improved = False
                note = "R4: degraded " + ", ".join(degraded)

        rollback_to = None
        if self.state.leap is not None:
            tick = honeymoon_tick(self.state.leap, improved, cfg.honeymoon_length)
            self.trace.note("honeymoon", iteration=it, outcome=tick, non_improving=self.state.leap.non_improving)
            if tick == "exit_leap_improved":
                self.state.leap = None
            elif tick == "rollback_to_pre_leap":
                rollback_to = self.state.leap.pre_leap_snapshot
                self.state.leap = None
        elif status == "ok" and not improved:
            vcs.rollback(pre)
            status = "rolled_back"
        if rollback_to is not None:
            vcs.rollback(rollback_to)
            if status == "ok":
                status = "rolled_back"
            note = (note + "; " if note else "") + "honeymoon over: restored pre-leap best"

        entry = LedgerEntry(
            iteration=it,
            path=path,
            pre_snapshot=pre,
            post_snapshot=post,
            primary_value=value,
            metrics=metrics,
            idea_id=idea.id,
            idea_type=idea.type,
            is_best=improved,
            status=status,
            note=note,
        )
        if improved:
            vcs.advance_best(post, entry)
            self.state.best_snapshot = post
            self.state.best_value = value
            self.monitor_state.best_snapshot = post
        else:
            vcs.record_score(entry)

        update_after_iteration(self.library, entry, leap_idea=idea if path == "leap" else None)
        self._save_library()
        self.state.iteration = it
        self.budget.rounds_consumed = it
        self._supervise(status, value)
        self._persist()
        return entry

    def _supervise(self, status: str, value: Decimal | None) -> None:
        thr = self.config.regression_threshold
        regression = False
        if thr is not None and status == "ok" and value is not None and self.state.best_value:
            best = self.state.best_value
            loss = best - value if self.config.metric_direction == "maximize" else value - best
            regression = loss / abs(best) > to_decimal(thr)
        _phase, action = supervise(self.trace, self.monitor_state, self.budget, regression=regression)
        if action.kind == "rollback":
            self.vcs.rollback(action.argument)
            self.state.leap = None

    # -- P4

    def finalize(self, out_dir: str | Path | None) -> LoopOutcome:
        self._enter("P4")
        vcs = self.vcs
        best = vcs.tag(BEST_TAG)
        vcs.rollback(best)
        result = self._evaluate()
        expected = self.state.best_value
        warning = None
        if not result.ok:
            warning = f"final evaluation {result.exit}: {result.reason}"
        else:
            diff = abs(result.primary_value - expected)
            allowed = self.config.final_tolerance * abs(expected)
            if diff > allowed:
                warning = f"final value {result.primary_value} differs from best {expected} beyond tolerance"
        if warning:
            logger.warning("task %s: %s", self.seq, warning)
        self.state.final = {
            "seq": self.seq,
            "metric": self.config.primary_metric,
            "direction": self.config.metric_direction,
            "best_snapshot": best,
            "best_value": str(expected),
            "final_value": None if result.primary_value is None else str(result.primary_value),
            "tolerance": str(self.config.final_tolerance),
            "stop_reason": self.state.stop_reason,
            "warning": warning,
        }
        bundle = None
        if out_dir is not None:
            bundle = export_bundle(self.paths, out_dir, self.seq, self.state.final)
        self._enter("done")
        return LoopOutcome(self.seq, "finalized", expected, self.state.iteration, self.state.stop_reason, bundle, warning)


# -- bundles -------------------------------------------------------------------------


def bundle_dir(out_dir: str | Path, seq: int) -> Path:
    return Path(out_dir) / str(seq) / "optimized"


def export_bundle(paths: TaskPaths, out_dir: str | Path, seq: int, final: dict) -> Path:
    """Write ``<out>/<seq>/optimized/`` atomically: staged, then renamed into place.

    ``final.json`` is written last inside the staging directory, so a bundle
    that has it is complete.
    """
    target = bundle_dir(out_dir, seq)
    staging = target.with_name(".optimized.staging")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    store = SnapshotStore(paths.snapshot_dir)
    store.materialize(final["best_snapshot"], staging / "workspace")
    shutil.copyfile(paths.scores, staging / "scores.jsonl")
    docs = paths.run_dir / "docs"
    if docs.is_dir():
        shutil.copytree(docs, staging / "docs")
    _io.atomic_write_json(staging / "final.json", final)
    if target.exists():
        shutil.rmtree(target)
    staging.rename(target)
    return target


def verify_bundle(path: str | Path) -> tuple[bool, list[str]]:
    """Check a bundle: final.json present, ledger parses with a coherent best chain."""
    path = Path(path)
    problems = []
    final = _io.load_json(path / "final.json")
    if not isinstance(final, dict):
        return False, ["final.json missing or unreadable"]
    if not (path / "scores.jsonl").is_file():
        return False, ["scores.jsonl missing"]
    if not (path / "workspace").is_dir():
        problems.append("workspace missing")
    try:
        entries = parse_ledger(path / "scores.jsonl")
    except (ValueError, KeyError, TypeError) as exc:
        return False, [f"scores.jsonl unparsable: {exc}"]
    problems += validate_ledger(entries, final.get("direction", "maximize"))
    bests = [e for e in entries if e.is_best]
    if bests and final.get("best_value") is not None and Decimal(final["best_value"]) != bests[-1].primary_value:
        problems.append("final.json best_value disagrees with the ledger")
    return not problems, problems
