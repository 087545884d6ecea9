"""Running the experiment: initialization plan, sandboxes, evaluation, patches.

Two backends ship with the engine.  :class:`SimulationBackend` evaluates a
declared score landscape over integer knobs stored in ``sim.json`` and is
deterministic, so the optimization loop has a brute-forceable oracle.
:class:`ProcessBackend` runs a real entry command in a subprocess and reads
metrics from the last JSON line it prints.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import random
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Mapping, Protocol

from . import _io
from .errors import EngineError, PatchConflict, PlanHalted

logger = logging.getLogger(__name__)

PLAN_STAGES = (
    "input_analysis",
    "subtask_decomposition",
    "environment_construction",
    "dependency_resolution",
    "resource_acquisition",
    "repository_inspection",
    "command_discovery",
    "execution_preparation",
)
SIM_FILE = "sim.json"
DEFAULT_SIM_TIMEOUT = 10.0


# -- initialization plan ---------------------------------------------------------


@dataclass(frozen=True)
class EntryCommand:
    argv: tuple[str, ...]
    cwd: str = "."
    env: dict = field(default_factory=dict, hash=False)

    def to_dict(self) -> dict:
        return {"argv": list(self.argv), "cwd": self.cwd, "env": dict(self.env)}

    @classmethod
    def from_dict(cls, d: dict) -> EntryCommand:
        return cls(tuple(d["argv"]), d.get("cwd", "."), dict(d.get("env", {})))


@dataclass
class InitPlan:
    stages: dict[str, str] = field(default_factory=lambda: {s: "pending" for s in PLAN_STAGES})
    entry_commands: list[EntryCommand] = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    baseline_config: dict = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(v == "done" for v in self.stages.values())

    def next_stage(self) -> str | None:
        for s in PLAN_STAGES:
            if self.stages[s] != "done":
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "stages": [[s, self.stages[s]] for s in PLAN_STAGES],
            "discovered": {
                "entry_commands": [c.to_dict() for c in self.entry_commands],
                "environment": self.environment,
                "baseline_config": self.baseline_config,
            },
            "errors": self.errors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> InitPlan:
        disc = d.get("discovered", {})
        return cls(
            stages=dict(d["stages"]),
            entry_commands=[EntryCommand.from_dict(c) for c in disc.get("entry_commands", [])],
            environment=disc.get("environment", {}),
            baseline_config=disc.get("baseline_config", {}),
            errors=d.get("errors", {}),
        )


class Planner(Protocol):
    def run_stage(self, stage: str, task, plan: InitPlan) -> dict:
        """Discovered fields produced by ``stage`` (entry_commands, environment, baseline_config)."""
        ...


def plan_initialization(task, planner: Planner, plan_path: str | Path, on_failure: Callable | None = None) -> InitPlan:
    """Run the eight initialization stages in order, persisting after each.

    A persisted plan resumes at its first stage that is not done.  A planner
    failure marks the stage failed, persists, notifies ``on_failure`` and
    raises :class:`PlanHalted`.
    """
    plan_path = Path(plan_path)
    raw = _io.load_json(plan_path)
    plan = InitPlan.from_dict(raw) if raw else InitPlan()
    if raw is None:
        _io.atomic_write_json(plan_path, plan.to_dict())
    while (stage := plan.next_stage()) is not None:
        try:
            found = planner.run_stage(stage, task, plan) or {}
            if "entry_commands" in found:
                plan.entry_commands = [
                    c if isinstance(c, EntryCommand) else EntryCommand.from_dict(c) for c in found["entry_commands"]
                ]
            plan.environment.update(found.get("environment", {}))
            plan.baseline_config.update(found.get("baseline_config", {}))
            if stage == "execution_preparation" and not plan.entry_commands:
                raise EngineError("no entry command discovered")
        except Exception as exc:
            plan.stages[stage] = "failed"
            plan.errors[stage] = str(exc)
            _io.atomic_write_json(plan_path, plan.to_dict())
            if on_failure is not None:
                on_failure(stage, exc)
            raise PlanHalted(f"initialization halted at {stage}: {exc}") from exc
        plan.stages[stage] = "done"
        plan.errors.pop(stage, None)
        _io.atomic_write_json(plan_path, plan.to_dict())
    return plan


class SimPlanner:
    """Planner for simulation workspaces: every stage succeeds."""

    def __init__(self, workspace: str | Path, fail_at: str | None = None):
        self.workspace = Path(workspace)
        self.fail_at = fail_at
        self.calls: list[str] = []

    def run_stage(self, stage, task, plan):
        self.calls.append(stage)
        if stage == self.fail_at:
            raise EngineError(f"scripted failure at {stage}")
        if stage == "environment_construction":
            return {"environment": {"backend": "simulation"}}
        if stage == "command_discovery":
            cfg = read_sim_config(self.workspace)
            return {
                "entry_commands": [EntryCommand(("sim-eval", SIM_FILE))],
                "baseline_config": {"knobs": cfg["knobs"]},
            }
        return {}


class FilePlanner:
    """Planner reading a declared ``entry.json`` (argv, cwd, env) from the workspace."""

    def __init__(self, workspace: str | Path):
        self.workspace = Path(workspace)

    def run_stage(self, stage, task, plan):
        if stage == "command_discovery":
            path = self.workspace / "entry.json"
            if not path.is_file():
                raise EngineError("workspace has no entry.json")
            return {"entry_commands": [EntryCommand.from_dict(json.loads(path.read_text(encoding="utf-8")))]}
        return {}


# -- evaluation ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    metrics: dict[str, Decimal]
    primary_value: Decimal | None
    duration: float
    exit: str  # ok | crashed | timeout
    reason: str = ""
    trace_tail: str = ""

    def __post_init__(self):
        if self.exit not in ("ok", "crashed", "timeout"):
            raise ValueError(f"unknown exit {self.exit!r}")
        if self.exit == "ok" and self.primary_value is None:
            raise ValueError("ok result without a primary metric")

    @property
    def ok(self) -> bool:
        return self.exit == "ok"


@dataclass
class SandboxHandle:
    id: str
    seq: int
    workspace: Path
    devices: tuple = ()
    live: bool = True


class SandboxPool:
    """Enforces at most one live sandbox per task."""

    def __init__(self):
        self._live: dict[int, SandboxHandle] = {}
        self._lock = threading.Lock()
        self._counter = itertools.count(1)
        self.history: list[tuple[str, int, str]] = []

    def open(self, seq: int, workspace, devices=()) -> SandboxHandle:
        with self._lock:
            if seq in self._live:
                raise EngineError(f"task {seq} already has live sandbox {self._live[seq].id}")
            handle = SandboxHandle(f"sbx-{seq}-{next(self._counter)}", seq, Path(workspace), tuple(devices))
            self._live[seq] = handle
            self.history.append(("open", seq, handle.id))
            return handle

    def close(self, handle: SandboxHandle) -> None:
        with self._lock:
            if self._live.get(handle.seq) is handle:
                del self._live[handle.seq]
                self.history.append(("close", handle.seq, handle.id))
            handle.live = False

    def live(self) -> dict[int, SandboxHandle]:
        with self._lock:
            return dict(self._live)


class Backend(Protocol):
    pool: SandboxPool

    def run_evaluation(self, sandbox: SandboxHandle, entry: EntryCommand, timeout: float) -> EvalResult: ...

    def repair(self, sandbox: SandboxHandle, action) -> bool: ...


# -- simulation -----------------------------------------------------------------


DEFAULT_SIM = {
    "knobs": {"a": 0, "b": 0, "c": 0},
    "grid": {"a": [0, 1, 2, 3], "b": [0, 1], "c": [0, 1, 2]},
    "metric": "score",
}


def default_score(knobs: Mapping[str, int]) -> Decimal:
    """0.50 + 0.02 * min(a, 3) + 0.04 * [b == 1 and c == 2]."""
    a, b, c = knobs.get("a", 0), knobs.get("b", 0), knobs.get("c", 0)
    bonus = Decimal("0.04") if (b == 1 and c == 2) else Decimal(0)
    return Decimal("0.50") + Decimal("0.02") * min(a, 3) + bonus


def read_sim_config(workspace: str | Path) -> dict:
    path = Path(workspace) / SIM_FILE
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise EngineError(f"{path} missing") from None
    merged = dict(DEFAULT_SIM)
    merged.update(cfg)
    return merged


def grid_points(grid: Mapping[str, list]) -> list[dict[str, int]]:
    """Full knob assignments in lexicographic order of the grid's keys."""
    names = sorted(grid)
    return [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]


def brute_force(grid: Mapping[str, list], score=default_score) -> list[tuple[dict, Decimal]]:
    return [(p, score(p)) for p in grid_points(grid)]


def _fault_matches(fault: dict, knobs: Mapping) -> bool:
    return all(knobs.get(k) == v for k, v in fault.get("when", {}).items())


class SimulationBackend:
    """Deterministic evaluator of the knob landscape in ``sim.json``.

    Optional ``sim.json`` keys:

    - ``eval_seconds``: simulated runtime; above the timeout the run times out.
    - ``faults``: list of ``{"id", "when": {knob: value}, "message", "fixed_by"}``;
      an active matching fault crashes the run until a repair labelled
      ``fixed_by`` removes it.
    - ``aux_metrics``: ``{name: {"base", "knob", "per_unit"}}`` extra reported metrics.
    - ``noise``: amplitude of seeded noise added to the primary metric.
    """

    def __init__(self, seed: int = 0, score=default_score):
        self.seed = seed
        self.score = score
        self.pool = SandboxPool()
        self.evaluations = 0

    def run_evaluation(self, sandbox: SandboxHandle, entry: EntryCommand, timeout: float = DEFAULT_SIM_TIMEOUT) -> EvalResult:
        if not sandbox.live:
            raise EngineError(f"sandbox {sandbox.id} is not live")
        self.evaluations += 1
        cfg = read_sim_config(sandbox.workspace)
        knobs = cfg["knobs"]
        seconds = float(cfg.get("eval_seconds", 0))
        if seconds > timeout:
            return EvalResult({}, None, timeout, "timeout", f"evaluation exceeded {timeout}s")
        for fault in cfg.get("faults", []):
            if _fault_matches(fault, knobs):
                msg = fault.get("message", "simulated failure")
                return EvalResult({}, None, seconds, "crashed", msg.splitlines()[-1], msg)
        value = self.score(knobs)
        noise = Decimal(str(cfg.get("noise", 0)))
        if noise:
            rng = random.Random(_stable_seed(self.seed, knobs))
            value += (Decimal(rng.randint(-1000, 1000)) / 1000 * noise).quantize(Decimal("0.0001"))
        metric = cfg.get("metric", "score")
        metrics = {metric: value}
        for name, spec in sorted(cfg.get("aux_metrics", {}).items()):
            metrics[name] = Decimal(str(spec["base"])) + Decimal(str(spec.get("per_unit", 0))) * knobs.get(spec.get("knob"), 0)
        return EvalResult(metrics, value, seconds, "ok")

    def repair(self, sandbox: SandboxHandle, action) -> bool:
        path = sandbox.workspace / SIM_FILE
        raw = json.loads(path.read_text(encoding="utf-8"))
        knobs = read_sim_config(sandbox.workspace)["knobs"]
        faults = raw.get("faults", [])
        keep = [f for f in faults if not (_fault_matches(f, knobs) and f.get("fixed_by") == action.label)]
        if len(keep) == len(faults):
            return False
        raw["faults"] = keep
        _io.atomic_write_text(path, json.dumps(raw, indent=2, sort_keys=True) + "\n")
        return True


def _stable_seed(seed: int, knobs: Mapping) -> int:
    h = hashlib.sha256(f"{seed}|{_io.dumps_line(dict(knobs))}".encode()).hexdigest()
    return int(h[:16], 16)


# -- subprocess backend ------------------------------------------------------------


class ProcessBackend:
    """Runs the entry command in the workspace; metrics come from stdout.

    The last stdout line that parses as a JSON object is the metrics map.
    Repairs are delegated to ``repairer(sandbox, action) -> bool`` if given.
    """

    def __init__(self, primary_metric: str, repairer: Callable | None = None, tail_lines: int = 20):
        self.primary_metric = primary_metric
        self.repairer = repairer
        self.tail_lines = tail_lines
        self.pool = SandboxPool()

    def run_evaluation(self, sandbox: SandboxHandle, entry: EntryCommand, timeout: float) -> EvalResult:
        if not sandbox.live:
            raise EngineError(f"sandbox {sandbox.id} is not live")
        env = dict(os.environ)
        env.update(entry.env)
        if sandbox.devices:
            env["CUDA_VISIBLE_DEVICES"] = ",".join(str(d) for d in sandbox.devices)
        start = time.monotonic()
        try:
            proc = subprocess.run(
                list(entry.argv),
                cwd=sandbox.workspace / entry.cwd,
                env=env,
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except subprocess.TimeoutExpired as exc:
            tail = _tail(exc.stderr or "", self.tail_lines)
            return EvalResult({}, None, time.monotonic() - start, "timeout", f"evaluation exceeded {timeout}s", tail)
        except OSError as exc:
            return EvalResult({}, None, time.monotonic() - start, "crashed", str(exc), str(exc))
        duration = time.monotonic() - start
        tail = _tail(proc.stderr, self.tail_lines) or _tail(proc.stdout, self.tail_lines)
        if proc.returncode != 0:
            last = tail.splitlines()[-1] if tail else f"exit status {proc.returncode}"
            return EvalResult({}, None, duration, "crashed", last, tail or last)
        metrics = _last_json(proc.stdout)
        if metrics is None or self.primary_metric not in metrics:
            reason = f"primary metric {self.primary_metric!r} not reported"
            return EvalResult({}, None, duration, "crashed", reason, tail or reason)
        metrics = {k: Decimal(str(v)) for k, v in metrics.items()}
        return EvalResult(metrics, metrics[self.primary_metric], duration, "ok")

    def repair(self, sandbox: SandboxHandle, action) -> bool:
        return bool(self.repairer and self.repairer(sandbox, action))


def _tail(text: str, n: int) -> str:
    return "\n".join(text.strip().splitlines()[-n:])


def _last_json(stdout: str) -> dict | None:
    for line in reversed(stdout.strip().splitlines()):
        try:
            obj = json.loads(line)
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


# -- modifications -----------------------------------------------------------------


def _inside(workspace: Path, rel: str) -> Path:
    target = (workspace / rel).resolve()
    root = workspace.resolve()
    if target != root and root not in target.parents:
        raise PatchConflict(f"path {rel!r} escapes the workspace")
    return target


def apply_modification(workspace: str | Path, patch: dict | None, idea_id: str | None = None, provenance: str | Path | None = None) -> bool:
    """Apply ``patch`` all-or-nothing; raise :class:`PatchConflict` leaving the tree untouched.

    Patch kinds:

    - ``{"kind": "knobs", "set": {...}, "expect": {...}}``: edit ``sim.json`` knobs.
    - ``{"kind": "files", "edits": [...]}`` where an edit is ``{"path", "content"}``,
      ``{"path", "old", "new"}`` (exact single replacement) or ``{"path", "delete": true}``.

    An empty or missing patch is an applied no-op.  Provenance goes to a
    JSONL file outside the workspace.
    """
    workspace = Path(workspace)
    writes: dict[Path, str | None] = {}
    touched: list[str] = []
    kind = (patch or {}).get("kind")
    if not patch or kind is None:
        pass
    elif kind == "knobs":
        path = workspace / SIM_FILE
        if not path.is_file():
            raise PatchConflict("knob patch on a workspace without sim.json")
        raw = json.loads(path.read_text(encoding="utf-8"))
        knobs = raw.setdefault("knobs", {})
        for k, v in patch.get("expect", {}).items():
            if knobs.get(k) != v:
                raise PatchConflict(f"knob {k} is {knobs.get(k)!r}, patch expects {v!r}")
        for k, v in patch.get("set", {}).items():
            if k not in knobs:
                raise PatchConflict(f"unknown knob {k!r}")
            knobs[k] = v
        writes[path] = json.dumps(raw, indent=2, sort_keys=True) + "\n"
        touched.append(SIM_FILE)
    elif kind == "files":
        pending: dict[Path, str | None] = {}
        for edit in patch.get("edits", []):
            target = _inside(workspace, edit["path"])
            touched.append(edit["path"])
            if edit.get("delete"):
                if not target.is_file():
                    raise PatchConflict(f"cannot delete missing {edit['path']}")
                pending[target] = None
            elif "content" in edit:
                pending[target] = edit["content"]
            else:
                if target in pending:
                    current = pending[target]
                elif target.is_file():
                    current = target.read_text(encoding="utf-8")
                else:
                    current = None
                if current is None:
                    raise PatchConflict(f"cannot edit missing {edit['path']}")
                if current.count(edit["old"]) != 1:
                    raise PatchConflict(f"{edit['path']}: expected exactly one match for the old text")
                pending[target] = current.replace(edit["old"], edit["new"])
        writes = pending
    else:
        raise PatchConflict(f"unknown patch kind {kind!r}")

    for target, content in writes.items():
        if content is None:
            target.unlink()
        else:
            _io.atomic_write_text(target, content)
    if provenance is not None:
        digest = hashlib.sha256(_io.dumps_line(patch or {}).encode()).hexdigest()
        _io.append_jsonl(provenance, {"idea_id": idea_id, "patch_sha256": digest, "files": sorted(set(touched))})
    return True


def knob_patch(**values) -> dict:
    return {"kind": "knobs", "set": dict(values)}


def eval_to_dict(result: EvalResult) -> dict:
    d = asdict(result)
    d["metrics"] = {k: str(v) for k, v in result.metrics.items()}
    d["primary_value"] = None if result.primary_value is None else str(result.primary_value)
    return d
