"""Fleet scheduler: FIFO queue over compute units, durable state, recovery.

Every transition is persisted with an atomic replace before the scheduler
acts on it.  A launch is recorded as an intent first; the launcher leaves a
per-task pid file, so recovery can tell "never started" from "started but
not yet recorded".  Task processes are independent of the scheduler and
survive its death.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import psutil

from . import _io
from .errors import CorruptStateError, SchedulerHalt

logger = logging.getLogger(__name__)

STATE_VERSION_KEY = "version"
TASK_STAGES = ("queued", "launching", "running", "finalized", "failed")
TERMINAL = ("finalized", "failed")


@dataclass(frozen=True)
class ProcessInfo:
    pid: int
    start_time: float


class Launcher(Protocol):
    def launch(self, seq: int, devices: Sequence[int]) -> ProcessInfo: ...

    def lookup(self, seq: int) -> ProcessInfo | None:
        """Pid file left by a launch, if any."""
        ...

    def alive(self, info: ProcessInfo) -> bool: ...

    def verify(self, seq: int) -> tuple[bool, list[str]]:
        """Inspect the task's output bundle after its process exited."""
        ...

    def cleanup(self, seq: int) -> None: ...


def make_units(count: int, devices_per_unit: int = 2) -> list[dict]:
    if count < 1 or devices_per_unit < 1:
        raise ValueError("need at least one unit with at least one device")
    return [
        {"id": u, "devices": list(range(u * devices_per_unit, (u + 1) * devices_per_unit)), "active": None}
        for u in range(count)
    ]


def check_state(state: dict) -> list[str]:
    """Structural invariants of a scheduler state document."""
    problems = []
    seen_devices: set[int] = set()
    holders: dict[int, int] = {}
    for unit in state["units"]:
        devs = set(unit["devices"])
        if devs & seen_devices:
            problems.append(f"unit {unit['id']} shares devices")
        seen_devices |= devs
        if unit["active"] is not None:
            if unit["active"] in holders:
                problems.append(f"seq {unit['active']} holds two units")
            holders[unit["active"]] = unit["id"]
    for key, t in state["tasks"].items():
        seq = int(key)
        if t["stage"] not in TASK_STAGES:
            problems.append(f"seq {seq}: unknown stage {t['stage']}")
        if t["stage"] in ("launching", "running"):
            if holders.get(seq) != t["unit"]:
                problems.append(f"seq {seq} is {t['stage']} without holding unit {t['unit']}")
        elif seq in holders:
            problems.append(f"seq {seq} is {t['stage']} but holds unit {holders[seq]}")
    for seq in state["queue"]:
        if state["tasks"].get(str(seq), {}).get("stage") != "queued":
            problems.append(f"queued seq {seq} is not in stage queued")
    return problems


def read_state(path: str | Path) -> dict | None:
    """Read-only load; ``None`` when absent, CorruptStateError when unreadable."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return None
    try:
        state = json.loads(text)
        for key in ("version", "units", "tasks", "queue"):
            state[key]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptStateError(f"{path}: {exc}") from exc
    problems = check_state(state)
    if problems:
        raise CorruptStateError(f"{path}: " + "; ".join(problems))
    return state


class FleetScheduler:
    def __init__(
        self,
        state_path: str | Path,
        launcher: Launcher,
        units: int = 1,
        devices_per_unit: int = 2,
        clock: Callable[[], float] = time.time,
    ):
        self.path = Path(state_path)
        self.launcher = launcher
        self.clock = clock
        state = read_state(self.path)
        if state is None:
            state = {"version": 0, "units": make_units(units, devices_per_unit), "tasks": {}, "queue": []}
        self.state = state

    # -- persistence

    def persist(self) -> None:
        self.state["version"] += 1
        try:
            _io.atomic_write_text(self.path, _io.dumps_pretty(self.state))
        except OSError as exc:
            raise SchedulerHalt(f"cannot persist scheduler state: {exc}") from exc

    @property
    def version(self) -> int:
        return self.state["version"]

    # -- queries

    def task(self, seq: int) -> dict | None:
        return self.state["tasks"].get(str(seq))

    def stages(self) -> dict[int, str]:
        return {int(k): v["stage"] for k, v in self.state["tasks"].items()}

    def running(self) -> list[int]:
        return [int(k) for k, v in self.state["tasks"].items() if v["stage"] in ("launching", "running")]

    def idle_units(self) -> list[dict]:
        return [u for u in self.state["units"] if u["active"] is None]

    def done(self) -> bool:
        return not self.state["queue"] and not self.running()

    def _unit(self, unit_id: int) -> dict:
        return self.state["units"][unit_id]

    # -- transitions

    def submit(self, seqs: Iterable[int]) -> list[int]:
        added = []
        for seq in seqs:
            if str(seq) in self.state["tasks"]:
                continue
            self.state["tasks"][str(seq)] = {"stage": "queued", "unit": None, "pid": None, "start_time": None, "started_at": None}
            self.state["queue"].append(seq)
            added.append(seq)
        if added:
            self.persist()
        return added

    def dispatch(self) -> list[tuple[int, int]]:
        """Fill idle units from the head of the queue, in order."""
        assignments = []
        for unit in self.idle_units():
            if not self.state["queue"]:
                break
            seq = self.state["queue"].pop(0)
            t = self.task(seq)
            t.update(stage="launching", unit=unit["id"])
            unit["active"] = seq
            self.persist()
            _io.fault_point(f"sched:launch:{seq}:before")
            try:
                info = self.launcher.launch(seq, tuple(unit["devices"]))
            except Exception as exc:
                logger.error("launch of seq %s failed: %s", seq, exc)
                t.update(stage="failed", unit=None, error=f"launch failed: {exc}")
                unit["active"] = None
                self.persist()
                continue
            _io.fault_point(f"sched:launch:{seq}:after")
            t.update(stage="running", pid=info.pid, start_time=info.start_time, started_at=self.clock())
            self.persist()
            assignments.append((seq, unit["id"]))
        return assignments

    def finalize_task(self, seq: int) -> str:
        t = self.task(seq)
        if t is None:
            raise KeyError(seq)
        if t["stage"] in TERMINAL:
            return t["stage"]
        ok, problems = self.launcher.verify(seq)
        _io.fault_point(f"sched:finalize:{seq}")
        self.launcher.cleanup(seq)
        unit = self._unit(t["unit"])
        unit["active"] = None
        t.update(stage="finalized" if ok else "failed", unit=None)
        if problems:
            t["diagnostics"] = problems
        self.persist()
        return t["stage"]

    def poll(self) -> list[int]:
        """Finalize every running task whose process has exited."""
        finished = []
        for seq in self.running():
            t = self.task(seq)
            if t["stage"] != "running":
                continue
            if not self.launcher.alive(ProcessInfo(t["pid"], t["start_time"])):
                self.finalize_task(seq)
                finished.append(seq)
        return finished

    def recover(self) -> dict[int, str]:
        """Reconcile recorded launches with reality after a scheduler restart."""
        changes: dict[int, str] = {}
        for seq in self.running():
            t = self.task(seq)
            if t["stage"] == "launching":
                info = self.launcher.lookup(seq)
                if info is None:
                    # never started: back to the front of the queue
                    self._unit(t["unit"])["active"] = None
                    t.update(stage="queued", unit=None)
                    self.state["queue"].insert(0, seq)
                    self.persist()
                    changes[seq] = "requeued"
                    continue
                t.update(stage="running", pid=info.pid, start_time=info.start_time, started_at=t["started_at"] or self.clock())
                self.persist()
                changes[seq] = "adopted"
            if not self.launcher.alive(ProcessInfo(t["pid"], t["start_time"])):
                changes[seq] = self.finalize_task(seq)
        return changes

    def step(self) -> bool:
        """One scheduling round; returns True while work remains."""
        self.poll()
        self.dispatch()
        return not self.done()

    def run(self, sleep: Callable[[float], None] = time.sleep, interval: float = 1.0) -> dict[int, str]:
        self.recover()
        while self.step():
            sleep(interval)
        return self.stages()


# -- real processes --------------------------------------------------------------------


class ProcessLauncher:
    """Launches ``python -m sotaengine optimize`` detached from the scheduler."""

    def __init__(self, state_dir: str | Path, out_dir: str | Path, extra_args: Sequence[str] = ()):
        self.state_dir = Path(state_dir)
        self.out_dir = Path(out_dir)
        self.extra_args = list(extra_args)

    def pidfile(self, seq: int) -> Path:
        return self.state_dir / str(seq) / "pidfile.json"

    def launch(self, seq, devices):
        log_dir = self.state_dir / str(seq)
        log_dir.mkdir(parents=True, exist_ok=True)
        argv = [
            sys.executable, "-m", "sotaengine", "--state-dir", str(self.state_dir),
            "optimize", str(seq), "--out-dir", str(self.out_dir),
            "--devices", ",".join(str(d) for d in devices), *self.extra_args,
        ]
        with open(log_dir / "task.log", "ab") as log:
            proc = subprocess.Popen(argv, stdout=log, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL, start_new_session=True)
        try:
            start = psutil.Process(proc.pid).create_time()
        except psutil.NoSuchProcess:
            start = 0.0
        info = ProcessInfo(proc.pid, start)
        _io.atomic_write_json(self.pidfile(seq), {"pid": info.pid, "start_time": info.start_time})
        return info

    def lookup(self, seq):
        d = _io.load_json(self.pidfile(seq))
        return None if d is None else ProcessInfo(d["pid"], d["start_time"])

    def alive(self, info):
        return process_alive(info)

    def verify(self, seq):
        from .loop import bundle_dir, verify_bundle

        return verify_bundle(bundle_dir(self.out_dir, seq))

    def cleanup(self, seq):
        info = self.lookup(seq)
        if info is not None and process_alive(info):
            kill_process_group(info)
        self.pidfile(seq).unlink(missing_ok=True)


def process_alive(info: ProcessInfo) -> bool:
    """pid plus start time, so a recycled pid does not count as alive."""
    try:
        proc = psutil.Process(info.pid)
        if abs(proc.create_time() - info.start_time) > 1e-3:
            return False
        return proc.status() != psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return False
    except psutil.AccessDenied:
        return True


def kill_process_group(info: ProcessInfo, sig: int = signal.SIGTERM) -> None:
    if not process_alive(info):
        return
    try:
        os.killpg(os.getpgid(info.pid), sig)
    except (ProcessLookupError, PermissionError):
        pass


# -- virtual cluster for simulation -----------------------------------------------------------


class VirtualCluster:
    """Deterministic stand-in for task processes that outlive the scheduler.

    ``durations[seq]`` is how many ticks a task runs; ``outcomes[seq]`` says
    whether it leaves a valid bundle; seqs in ``launch_failures`` fail to
    launch.  Time only moves through :meth:`tick`.
    """

    def __init__(self, durations: dict[int, int], outcomes: dict[int, bool], launch_failures: Iterable[int] = ()):
        self.durations = dict(durations)
        self.outcomes = dict(outcomes)
        self.launch_failures = set(launch_failures)
        self.now = 0
        self.next_pid = 1000
        self.procs: dict[int, dict] = {}  # pid -> {seq, start, end}
        self.pidfiles: dict[int, ProcessInfo] = {}
        self.bundles: dict[int, bool] = {}
        self.launches: list[int] = []
        self.cleaned: list[int] = []

    def tick(self, _interval: float = 0) -> None:
        self.now += 1
        for pid, p in self.procs.items():
            if p["end"] <= self.now and p["seq"] not in self.bundles:
                self.bundles[p["seq"]] = self.outcomes.get(p["seq"], True)

    def launch(self, seq, devices):
        if seq in self.launch_failures:
            raise RuntimeError("simulated launch failure")
        pid = self.next_pid
        self.next_pid += 1
        info = ProcessInfo(pid, float(self.now))
        self.procs[pid] = {"seq": seq, "start": self.now, "end": self.now + self.durations.get(seq, 1), "devices": tuple(devices)}
        self.pidfiles[seq] = info
        self.launches.append(seq)
        return info

    def lookup(self, seq):
        return self.pidfiles.get(seq)

    def alive(self, info):
        p = self.procs.get(info.pid)
        return p is not None and float(p["start"]) == info.start_time and self.now < p["end"]

    def verify(self, seq):
        if self.bundles.get(seq):
            return True, []
        return False, ["bundle missing"]

    def cleanup(self, seq):
        self.cleaned.append(seq)
        self.pidfiles.pop(seq, None)
