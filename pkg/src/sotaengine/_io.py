"""Durable file primitives shared by every persistent store.

All on-disk state goes through three operations:

* :func:`atomic_write_text` -- write to a sibling temp file, fsync, rename.
* :func:`append_line` -- append one complete record to a line-delimited log.
* :func:`read_lines` -- read a log, dropping a torn trailing record.

Each operation passes through named fault points (:func:`fault_point`).  In
production the hook is a no-op; crash tests install a hook that raises
:class:`SimulatedCrash` at the N-th boundary to enumerate kill points.
"""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterator

_fault_hook: Callable[[str], None] | None = None


class SimulatedCrash(BaseException):
    """Raised by an injected fault hook to model an abrupt process kill.

    Derives from BaseException so ordinary ``except Exception`` error
    handling in the engine cannot swallow it.
    """


def fault_point(label: str) -> None:
    hook = _fault_hook
    if hook is not None:
        hook(label)


@contextlib.contextmanager
def inject_faults(hook: Callable[[str], None]) -> Iterator[None]:
    global _fault_hook
    previous = _fault_hook
    _fault_hook = hook
    try:
        yield
    finally:
        _fault_hook = previous


class CrashAfter:
    """Fault hook that crashes at the ``n``-th fault point (0-based).

    ``labels`` records every boundary passed, so a dry run with
    ``n=None`` counts the boundaries of an operation.
    """

    def __init__(self, n: int | None, prefix: str = ""):
        self.n = n
        self.prefix = prefix
        self.labels: list[str] = []

    def __call__(self, label: str) -> None:
        if self.prefix and not label.startswith(self.prefix):
            return
        index = len(self.labels)
        self.labels.append(label)
        if self.n is not None and index == self.n:
            raise SimulatedCrash(label)


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Replace ``path`` with ``text`` so readers see old or new, never torn."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            half = len(data) // 2
            fh.write(data[:half])
            fault_point(f"write:{path.name}:partial")
            fh.write(data[half:])
            fh.flush()
            os.fsync(fh.fileno())
        fault_point(f"write:{path.name}:before-rename")
        os.replace(tmp, path)
    except SimulatedCrash:
        # a killed process leaves its temp file behind
        raise
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    _fsync_dir(path.parent)
    fault_point(f"write:{path.name}:done")


def atomic_write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, dumps_pretty(obj))


def append_line(path: str | os.PathLike, line: str) -> None:
    """Append one record.  A crash mid-write leaves a torn tail without newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if "\n" in line:
        raise ValueError("record must not contain a newline")
    data = (line + "\n").encode("utf-8")
    repair_torn_tail(path)
    fault_point(f"append:{path.name}:before")
    with open(path, "ab") as fh:
        half = len(data) // 2
        fh.write(data[:half])
        fh.flush()
        fault_point(f"append:{path.name}:partial")
        fh.write(data[half:])
        fh.flush()
        os.fsync(fh.fileno())
    fault_point(f"append:{path.name}:done")


def repair_torn_tail(path: Path) -> bool:
    """Truncate an unterminated final record left by a crashed append."""
    try:
        size = path.stat().st_size
    except FileNotFoundError:
        return False
    if size == 0:
        return False
    with open(path, "rb+") as fh:
        fh.seek(size - 1)
        if fh.read(1) == b"\n":
            return False
        fh.seek(0)
        content = fh.read()
        keep = content.rfind(b"\n") + 1
        fh.truncate(keep)
    return True


def read_lines(path: str | os.PathLike) -> list[str]:
    """Complete records of a log; a torn trailing record is ignored."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        return []
    text = raw.decode("utf-8")
    if not text:
        return []
    lines = text.split("\n")
    # the piece after the last newline is either "" or a torn record
    return [ln for ln in lines[:-1] if ln]


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    return [json.loads(ln) for ln in read_lines(path)]


def append_jsonl(path: str | os.PathLike, record: dict) -> None:
    append_line(path, dumps_line(record))


def _default(obj: Any) -> Any:
    if isinstance(obj, Decimal):
        return str(obj)
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def dumps_line(obj: Any) -> str:
    """Canonical single-line JSON: insertion-ordered keys, no spaces, UTF-8."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), default=_default)


def dumps_pretty(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2, default=_default) + "\n"


def load_json(path: str | os.PathLike, default: Any = None) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        return default
    return json.loads(text)
