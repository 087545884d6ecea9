"""Global resource registry: paper tasks, their external dependencies, gating.

The registry is purely symbolic.  Nothing in this module opens a network
connection; physical transfer belongs to :mod:`sotaengine.download`.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Iterable

from . import _io
from .errors import ConfigError, UnknownTaskError, InvalidTransitionError

logger = logging.getLogger(__name__)

GiB = 1024**3

STAGES = ("ingested", "resourced", "rubric_built", "replicated", "optimizing", "finalized", "failed")
TERMINAL_STAGES = frozenset({"finalized", "failed"})
TAXONOMIES = ("dataset", "model", "checkpoint", "misc")
VERDICTS = ("actionable", "placeholder", "not_released")
RESOURCE_STATUSES = ("registered", "queued", "downloading", "done", "failed", "skipped")

DEFAULT_S_MIN = 0
DEFAULT_S_MAX = 50 * GiB


@dataclass(frozen=True)
class MetricDescriptor:
    name: str
    direction: str  # "maximize" | "minimize"
    reported_baseline: Decimal | None = None
    reported_best_baseline: Decimal | None = None

    def __post_init__(self):
        if self.direction not in ("maximize", "minimize"):
            raise ValueError(f"direction must be maximize or minimize, got {self.direction!r}")

    def better(self, candidate, incumbent) -> bool:
        """Strict improvement under this metric's direction."""
        if self.direction == "maximize":
            return candidate > incumbent
        return candidate < incumbent

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "direction": self.direction,
            "reported_baseline": _dec_str(self.reported_baseline),
            "reported_best_baseline": _dec_str(self.reported_best_baseline),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricDescriptor:
        return cls(
            name=d["name"],
            direction=d["direction"],
            reported_baseline=_dec(d.get("reported_baseline")),
            reported_best_baseline=_dec(d.get("reported_best_baseline")),
        )


@dataclass(frozen=True)
class ReadinessVerdict:
    abstract_seen: bool
    shallow_tree_size: int
    readme_present: bool
    verdict: str
    rationale: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown readiness verdict {self.verdict!r}")

    @property
    def actionable(self) -> bool:
        return self.verdict == "actionable"


@dataclass(frozen=True)
class PaperTask:
    seq: int
    conference: str
    title: str
    repo_ref: str
    target_metric: MetricDescriptor
    readiness: ReadinessVerdict | None = None
    stage: str = "ingested"

    def to_dict(self) -> dict:
        return {
            "kind": "task",
            "seq": self.seq,
            "conference": self.conference,
            "title": self.title,
            "repo_ref": self.repo_ref,
            "target_metric": self.target_metric.to_dict(),
            "stage": self.stage,
        }


@dataclass(frozen=True)
class ResourceEntry:
    seq: int
    url: str
    taxonomy: str
    size_estimate_bytes: int | None = None
    status: str = "registered"
    local_path: str | None = None
    bytes_recorded: int | None = None

    def __post_init__(self):
        if self.taxonomy not in TAXONOMIES:
            raise ValueError(f"unknown taxonomy {self.taxonomy!r}")
        if self.status not in RESOURCE_STATUSES:
            raise ValueError(f"unknown resource status {self.status!r}")

    @property
    def indeterminate(self) -> bool:
        return self.size_estimate_bytes is None or self.size_estimate_bytes < 0

    def to_dict(self) -> dict:
        d = {"kind": "resource"}
        d.update(asdict(self))
        return d


@dataclass
class RegistrationDelta:
    seq: int
    added: list[ResourceEntry] = field(default_factory=list)
    duplicates: list[str] = field(default_factory=list)


@dataclass
class GateResult:
    admitted: list[int]
    excluded: dict[int, str]


def _dec(v) -> Decimal | None:
    return None if v is None else Decimal(str(v))


def _dec_str(v) -> str | None:
    return None if v is None else str(v)


class Registry:
    """Ordered map seq -> task plus per-task resource entries.

    Writes are serialized through one lock and persisted as a canonical
    snapshot after every mutation when ``root`` is set.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._tasks: dict[int, PaperTask] = {}
        self._resources: dict[int, list[ResourceEntry]] = {}
        self._lock = threading.Lock()

    # -- persistence ---------------------------------------------------

    @property
    def registry_path(self) -> Path | None:
        return None if self.root is None else self.root / "registry.jsonl"

    @property
    def readiness_path(self) -> Path | None:
        return None if self.root is None else self.root / "readiness.jsonl"

    @classmethod
    def load(cls, root: str | Path) -> Registry:
        reg = cls(root)
        readiness = {}
        for rec in _io.read_jsonl(reg.readiness_path):
            seq = rec.pop("seq")
            readiness[seq] = ReadinessVerdict(**rec)
        for rec in _io.read_jsonl(reg.registry_path):
            kind = rec.pop("kind")
            if kind == "task":
                task = PaperTask(
                    seq=rec["seq"],
                    conference=rec["conference"],
                    title=rec["title"],
                    repo_ref=rec["repo_ref"],
                    target_metric=MetricDescriptor.from_dict(rec["target_metric"]),
                    readiness=readiness.get(rec["seq"]),
                    stage=rec["stage"],
                )
                reg._tasks[task.seq] = task
                reg._resources.setdefault(task.seq, [])
            elif kind == "resource":
                reg._resources.setdefault(rec["seq"], []).append(ResourceEntry(**rec))
            else:
                raise ValueError(f"unknown registry record kind {kind!r}")
        return reg

    def serialize(self) -> tuple[str, str]:
        """Canonical (registry.jsonl, readiness.jsonl) contents."""
        reg_lines = []
        ready_lines = []
        for seq, task in self._tasks.items():
            reg_lines.append(_io.dumps_line(task.to_dict()))
            for entry in self._resources.get(seq, []):
                reg_lines.append(_io.dumps_line(entry.to_dict()))
            if task.readiness is not None:
                rec = {"seq": seq}
                rec.update(asdict(task.readiness))
                ready_lines.append(_io.dumps_line(rec))
        return (
            "".join(ln + "\n" for ln in reg_lines),
            "".join(ln + "\n" for ln in ready_lines),
        )

    def _persist(self) -> None:
        if self.root is None:
            return
        reg_text, ready_text = self.serialize()
        _io.atomic_write_text(self.readiness_path, ready_text)
        _io.atomic_write_text(self.registry_path, reg_text)

    # -- queries -------------------------------------------------------

    def __contains__(self, seq: int) -> bool:
        return seq in self._tasks

    def __len__(self) -> int:
        return len(self._tasks)

    def seqs(self) -> list[int]:
        return list(self._tasks)

    def task(self, seq: int) -> PaperTask:
        try:
            return self._tasks[seq]
        except KeyError:
            raise UnknownTaskError(seq) from None

    def tasks(self) -> list[PaperTask]:
        return list(self._tasks.values())

    def resources(self, seq: int) -> list[ResourceEntry]:
        self.task(seq)
        return list(self._resources.get(seq, []))

    # -- mutations -----------------------------------------------------

    def add_task(self, task: PaperTask) -> None:
        with self._lock:
            if task.seq in self._tasks:
                raise ValueError(f"duplicate seq {task.seq}")
            self._tasks[task.seq] = task
            self._resources[task.seq] = []
            self._persist()

    def set_readiness(self, seq: int, verdict: ReadinessVerdict) -> None:
        with self._lock:
            task = self.task(seq)
            self._tasks[seq] = replace(task, readiness=verdict)
            self._persist()

    def set_stage(self, seq: int, stage: str) -> None:
        with self._lock:
            task = self.task(seq)
            check_stage_transition(task.stage, stage)
            if stage != task.stage:
                self._tasks[seq] = replace(task, stage=stage)
                self._persist()

    def register_resources(self, seq: int, entries: Iterable[ResourceEntry]) -> RegistrationDelta:
        """Append entries for ``seq`` with status ``registered``.

        Duplicate (seq, url) pairs are idempotent no-ops and are reported in
        the delta.  Performs no network transfer.
        """
        with self._lock:
            self.task(seq)
            existing = self._resources.setdefault(seq, [])
            known = {e.url for e in existing}
            delta = RegistrationDelta(seq=seq)
            for entry in entries:
                if entry.seq != seq:
                    entry = replace(entry, seq=seq)
                if entry.url in known:
                    delta.duplicates.append(entry.url)
                    logger.info("seq %s: %s already registered, no-op", seq, entry.url)
                    continue
                size = entry.size_estimate_bytes
                if size is not None and size < 0:
                    size = None
                entry = replace(entry, status="registered", size_estimate_bytes=size)
                existing.append(entry)
                known.add(entry.url)
                delta.added.append(entry)
            if delta.added:
                self._persist()
            return delta

    def update_resource(self, seq: int, url: str, **changes) -> ResourceEntry:
        with self._lock:
            entries = self._resources.get(seq)
            if entries is None:
                raise UnknownTaskError(seq)
            for i, e in enumerate(entries):
                if e.url == url:
                    entries[i] = replace(e, **changes)
                    self._persist()
                    return entries[i]
            raise KeyError(url)

    def total_size(self, seq: int) -> int | None:
        return total_size(self.resources(seq))


def check_stage_transition(current: str, new: str) -> None:
    if new not in STAGES:
        raise InvalidTransitionError(f"unknown stage {new!r}")
    if current == new:
        return
    if current in TERMINAL_STAGES:
        raise InvalidTransitionError(f"{current} is terminal")
    if new == "failed":
        return
    if STAGES.index(new) < STAGES.index(current):
        raise InvalidTransitionError(f"{current} -> {new} moves backwards")


def total_size(entries: Iterable[ResourceEntry]) -> int | None:
    """Sum of size estimates; ``None`` (indeterminate) if any entry is."""
    total = 0
    for entry in entries:
        if entry.indeterminate:
            return None
        total += entry.size_estimate_bytes
    return total


def gate_tasks(
    registry: Registry,
    s_min: int = DEFAULT_S_MIN,
    s_max: int = DEFAULT_S_MAX,
    history: Iterable[int] = (),
) -> GateResult:
    """Admit tasks whose determinate total lies in ``[s_min, s_max]``.

    Every excluded seq is tagged with the first failing predicate, checked in
    the order: not actionable, terminal in history, indeterminate size,
    out of range.  Admission order is ingestion order.
    """
    if s_min > s_max:
        raise ConfigError(f"s_min ({s_min}) > s_max ({s_max})")
    history = set(history)
    admitted: list[int] = []
    excluded: dict[int, str] = {}
    for task in registry.tasks():
        seq = task.seq
        total = registry.total_size(seq)
        if task.readiness is not None and not task.readiness.actionable:
            excluded[seq] = "not_actionable"
        elif seq in history:
            excluded[seq] = "terminal_in_history"
        elif total is None:
            excluded[seq] = "indeterminate_size"
        elif not s_min <= total <= s_max:
            excluded[seq] = "out_of_range"
        else:
            admitted.append(seq)
    return GateResult(admitted=admitted, excluded=excluded)
