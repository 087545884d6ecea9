"""Content-addressed workspace snapshots, tags and the append-only score ledger.

Layout under a snapshot store directory::

    objects/<2 hex>/<62 hex>   file contents by SHA-256
    trees/<digest>.json        manifest of one workspace tree
    tags.json                  tag -> tree digest
    journal.json               pending advance_best intent (crash recovery)

Moving ``_best`` and appending the improving ledger entry form one atomic
step: an intent record is written first and replayed on open, so after any
crash the (tag, ledger) pair is either entirely old or entirely new.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import stat
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Iterable

from . import _io
from .errors import LedgerError, NotImprovingError, SnapshotError

logger = logging.getLogger(__name__)

BASELINE_TAG = "_baseline"
BEST_TAG = "_best"
IDEA_TYPES = ("PARAM", "CODE", "ALGO")
PATHS = ("normal", "leap", "baseline")
ENTRY_STATUSES = ("ok", "crashed", "rolled_back")


def to_decimal(value) -> Decimal:
    if isinstance(value, Decimal):
        return value
    if isinstance(value, float):
        return Decimal(repr(value))
    return Decimal(str(value))


def better(direction: str, candidate, incumbent) -> bool:
    if direction == "maximize":
        return candidate > incumbent
    if direction == "minimize":
        return candidate < incumbent
    raise ValueError(f"unknown direction {direction!r}")


# -- snapshots -----------------------------------------------------------------


@dataclass(frozen=True)
class TreeItem:
    path: str
    blob: str
    mode: str  # "file" | "exec" | "link"


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _tree_digest(items: Iterable[TreeItem]) -> str:
    h = hashlib.sha256()
    for it in sorted(items, key=lambda i: i.path):
        h.update(f"{it.mode} {it.blob} {it.path}\n".encode("utf-8"))
    return h.hexdigest()


def scan_tree(root: Path) -> dict[str, tuple[bytes, str]]:
    """Map relative posix path -> (content, mode) for every file under root."""
    out = {}
    for dirpath, dirnames, filenames in os.walk(root, followlinks=False):
        dirnames.sort()
        base = Path(dirpath)
        for name in list(dirnames):
            p = base / name
            if p.is_symlink():
                dirnames.remove(name)
                filenames.append(name)
        for name in sorted(filenames):
            p = base / name
            rel = p.relative_to(root).as_posix()
            if p.is_symlink():
                out[rel] = (os.readlink(p).encode("utf-8"), "link")
            else:
                mode = "exec" if p.stat().st_mode & stat.S_IXUSR else "file"
                out[rel] = (p.read_bytes(), mode)
    return out


def tree_hash(root: str | Path) -> str:
    """Digest of a directory tree without storing anything."""
    files = scan_tree(Path(root))
    return _tree_digest(TreeItem(p, _hash_bytes(c), m) for p, (c, m) in files.items())


class SnapshotStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)
        (self.root / "trees").mkdir(parents=True, exist_ok=True)

    def _blob_path(self, digest: str) -> Path:
        return self.root / "objects" / digest[:2] / digest[2:]

    def _put_blob(self, data: bytes) -> str:
        digest = _hash_bytes(data)
        path = self._blob_path(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return digest

    def capture(self, workspace: str | Path) -> str:
        workspace = Path(workspace)
        if not workspace.is_dir():
            raise SnapshotError(f"workspace {workspace} is not a directory")
        try:
            files = scan_tree(workspace)
        except OSError as exc:
            raise SnapshotError(f"unreadable workspace: {exc}") from exc
        items = [TreeItem(p, self._put_blob(c), m) for p, (c, m) in files.items()]
        digest = _tree_digest(items)
        tree_path = self.root / "trees" / f"{digest}.json"
        if not tree_path.exists():
            _io.atomic_write_text(
                tree_path,
                _io.dumps_line([[i.path, i.blob, i.mode] for i in sorted(items, key=lambda i: i.path)]) + "\n",
            )
        return digest

    def exists(self, digest: str) -> bool:
        return (self.root / "trees" / f"{digest}.json").is_file()

    def items(self, digest: str) -> list[TreeItem]:
        path = self.root / "trees" / f"{digest}.json"
        try:
            rows = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise SnapshotError(f"unknown snapshot {digest}") from None
        return [TreeItem(*r) for r in rows]

    def restore(self, digest: str, workspace: str | Path) -> None:
        """Make ``workspace`` byte-identical to snapshot ``digest``."""
        items = {i.path: i for i in self.items(digest)}
        workspace = Path(workspace)
        workspace.mkdir(parents=True, exist_ok=True)
        current = scan_tree(workspace)
        for rel in current:
            if rel not in items:
                (workspace / rel).unlink()
        for rel, item in items.items():
            have = current.get(rel)
            if have is not None and _hash_bytes(have[0]) == item.blob and have[1] == item.mode:
                continue
            target = workspace / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            if target.is_symlink() or target.exists():
                if target.is_dir() and not target.is_symlink():
                    shutil.rmtree(target)
                else:
                    target.unlink()
            data = self._blob_path(item.blob).read_bytes()
            if item.mode == "link":
                os.symlink(data.decode("utf-8"), target)
            else:
                target.write_bytes(data)
                mode = target.stat().st_mode
                if item.mode == "exec":
                    target.chmod(mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
                else:
                    target.chmod(mode & ~(stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH))
        _prune_empty_dirs(workspace)

    def materialize(self, digest: str, dest: str | Path) -> None:
        """Write snapshot ``digest`` into an empty or new directory."""
        self.restore(digest, dest)


def _prune_empty_dirs(root: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(root, topdown=False):
        p = Path(dirpath)
        if p != root and not any(p.iterdir()):
            p.rmdir()


# -- ledger -------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    iteration: int
    path: str
    pre_snapshot: str
    primary_value: Decimal | None
    metrics: dict[str, Decimal] = field(default_factory=dict)
    idea_id: str | None = None
    idea_type: str | None = None
    post_snapshot: str | None = None
    is_best: bool = False
    status: str = "ok"
    note: str | None = None

    def __post_init__(self):
        if self.path not in PATHS:
            raise ValueError(f"unknown path {self.path!r}")
        if self.status not in ENTRY_STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.idea_type is not None and self.idea_type not in IDEA_TYPES:
            raise ValueError(f"unknown idea type {self.idea_type!r}")
        if self.is_best and self.primary_value is None:
            raise ValueError("a best entry needs a primary value")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "idea_id": self.idea_id,
            "idea_type": self.idea_type,
            "path": self.path,
            "pre_snapshot": self.pre_snapshot,
            "post_snapshot": self.post_snapshot,
            "metrics": {k: str(to_decimal(v)) for k, v in self.metrics.items()},
            "primary_value": None if self.primary_value is None else str(to_decimal(self.primary_value)),
            "is_best": self.is_best,
            "status": self.status,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LedgerEntry:
        return cls(
            iteration=d["iteration"],
            idea_id=d.get("idea_id"),
            idea_type=d.get("idea_type"),
            path=d["path"],
            pre_snapshot=d["pre_snapshot"],
            post_snapshot=d.get("post_snapshot"),
            metrics={k: Decimal(v) for k, v in d.get("metrics", {}).items()},
            primary_value=None if d.get("primary_value") is None else Decimal(d["primary_value"]),
            is_best=d.get("is_best", False),
            status=d.get("status", "ok"),
            note=d.get("note"),
        )


def parse_ledger(path: str | Path) -> list[LedgerEntry]:
    return [LedgerEntry.from_dict(r) for r in _io.read_jsonl(path)]


def validate_ledger(entries: list[LedgerEntry], direction: str) -> list[str]:
    """Problems with sequencing and best-chain monotonicity (empty if coherent)."""
    problems = []
    best = None
    for i, e in enumerate(entries):
        if e.iteration != i:
            problems.append(f"line {i}: iteration {e.iteration}, expected {i}")
        if i == 0 and (e.path != "baseline" or e.idea_id is not None or not e.is_best):
            problems.append("iteration 0 must be a best-flagged baseline without idea")
        if e.is_best:
            if best is not None and not better(direction, e.primary_value, best):
                problems.append(f"iteration {e.iteration}: is_best but not strictly better than {best}")
            best = e.primary_value
    if not entries:
        problems.append("empty ledger")
    return problems


def relative_improvement(entries: list[LedgerEntry], direction: str) -> Decimal:
    """Relative gain of the final best over the iteration-0 baseline."""
    problems = validate_ledger(entries, direction)
    if problems:
        raise LedgerError("; ".join(problems))
    base = entries[0].primary_value
    best = [e for e in entries if e.is_best][-1].primary_value
    gain = best - base if direction == "maximize" else base - best
    return gain / abs(base)


class ScoreLedger:
    """Append-only ``scores.jsonl`` with iteration sequencing checks."""

    def __init__(self, path: str | Path, direction: str):
        self.path = Path(path)
        self.direction = direction
        _io.repair_torn_tail(self.path)
        self.entries: list[LedgerEntry] = parse_ledger(self.path)

    def reload(self) -> None:
        _io.repair_torn_tail(self.path)
        self.entries = parse_ledger(self.path)

    @property
    def next_iteration(self) -> int:
        return len(self.entries)

    def best_entry(self) -> LedgerEntry | None:
        for e in reversed(self.entries):
            if e.is_best:
                return e
        return None

    def check(self, entry: LedgerEntry) -> None:
        if entry.iteration != self.next_iteration:
            raise LedgerError(f"iteration {entry.iteration} out of sequence; expected {self.next_iteration}")
        if entry.iteration == 0:
            if entry.path != "baseline" or entry.idea_id is not None:
                raise LedgerError("iteration 0 must be the baseline with no idea")
        elif entry.path == "baseline":
            raise LedgerError("only iteration 0 may be the baseline")
        if entry.is_best:
            best = self.best_entry()
            if best is not None and not better(self.direction, entry.primary_value, best.primary_value):
                raise NotImprovingError(
                    f"{entry.primary_value} is not strictly better than best {best.primary_value}"
                )

    def append(self, entry: LedgerEntry) -> None:
        self.check(entry)
        _io.append_jsonl(self.path, entry.to_dict())
        self.entries.append(entry)


# -- workspace VCS ---------------------------------------------------------------


class WorkspaceVCS:
    """Snapshot/rollback/tag layer over one task workspace plus its ledger."""

    def __init__(self, workspace: str | Path, store_dir: str | Path, ledger_path: str | Path, direction: str):
        self.workspace = Path(workspace)
        self.store = SnapshotStore(store_dir)
        self.ledger = ScoreLedger(ledger_path, direction)
        self.direction = direction
        self.tags_path = self.store.root / "tags.json"
        self.journal_path = self.store.root / "journal.json"
        self.recover()

    # -- tags

    def tags(self) -> dict[str, str]:
        return _io.load_json(self.tags_path, {})

    def tag(self, name: str) -> str | None:
        return self.tags().get(name)

    def _write_tags(self, tags: dict[str, str]) -> None:
        _io.atomic_write_json(self.tags_path, tags)

    @property
    def initialized(self) -> bool:
        return BASELINE_TAG in self.tags()

    # -- operations

    def init_baseline(self) -> str:
        if self.initialized:
            raise SnapshotError("workspace already has a baseline")
        if not self.workspace.is_dir() or not any(self.workspace.iterdir()):
            raise SnapshotError(f"workspace {self.workspace} is empty")
        digest = self.store.capture(self.workspace)
        self._write_tags({BASELINE_TAG: digest, BEST_TAG: digest})
        return digest

    def snapshot(self) -> str:
        if not self.initialized:
            raise SnapshotError("init_baseline has not run")
        return self.store.capture(self.workspace)

    def rollback(self, digest: str) -> None:
        if not self.store.exists(digest):
            raise SnapshotError(f"unknown snapshot {digest}")
        self.store.restore(digest, self.workspace)

    def current_hash(self) -> str:
        return tree_hash(self.workspace)

    def record_score(self, entry: LedgerEntry) -> None:
        if entry.is_best and entry.iteration != 0:
            raise LedgerError("improving entries go through advance_best")
        self.ledger.append(entry)

    def advance_best(self, digest: str, entry: LedgerEntry) -> None:
        """Move ``_best`` to ``digest`` and append ``entry`` as one atomic step."""
        if not self.store.exists(digest):
            raise SnapshotError(f"unknown snapshot {digest}")
        entry = replace(entry, is_best=True, post_snapshot=entry.post_snapshot or digest)
        self.ledger.check(entry)
        journal = {"op": "advance_best", "digest": digest, "entry": entry.to_dict()}
        _io.atomic_write_json(self.journal_path, journal)
        self._apply_journal(journal)

    def _apply_journal(self, journal: dict) -> None:
        entry = LedgerEntry.from_dict(journal["entry"])
        if self.ledger.next_iteration == entry.iteration:
            _io.append_jsonl(self.ledger.path, entry.to_dict())
            self.ledger.entries.append(entry)
        tags = self.tags()
        tags[BEST_TAG] = journal["digest"]
        self._write_tags(tags)
        self.journal_path.unlink()
        _io.fault_point("journal:cleared")

    def recover(self) -> None:
        """Finish an interrupted advance_best, if any."""
        self.ledger.reload()
        journal = _io.load_json(self.journal_path)
        if journal is not None:
            logger.info("replaying advance_best journal for iteration %s", journal["entry"]["iteration"])
            self._apply_journal(journal)
