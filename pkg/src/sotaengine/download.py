"""Physical acquisition of registered resources.

Papers download in parallel, entries of one paper strictly in registration
order.  A url ledger (``url_ledger.jsonl``, one record per state change)
deduplicates urls across papers and carries the byte offsets used for
breakpoint resumption.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import shutil
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable, Protocol
from urllib.parse import unquote, urlsplit
from urllib.request import Request, urlopen

from . import _io
from .errors import FetchError, FetchTimeout
from .registry import Registry, ResourceEntry, total_size

logger = logging.getLogger(__name__)

STORAGE_DIRS = {"dataset": "datasets", "model": "models", "checkpoint": "checkpoints"}
ASSET_DIRS = ("datasets", "models", "checkpoints", "misc")
MAX_COMPONENT = 80
DEFAULT_TIMEOUT = 30 * 60.0

DEFAULT_HUB_PATTERNS = (
    r"^https?://(www\.)?huggingface\.co/(datasets/|spaces/)?[\w.-]+/[\w.-]+/?$",
    r"^hf://[\w.-]+/[\w.-]+/?$",
)

_ILLEGAL = re.compile(r'[\s/\\:*?"<>|\x00-\x1f]')
_FILE_LIKE = re.compile(r"[^/]+\.[A-Za-z0-9]{1,8}$")


def route_storage(entry: ResourceEntry | str) -> str:
    taxonomy = entry if isinstance(entry, str) else entry.taxonomy
    return STORAGE_DIRS.get(taxonomy, "misc") + "/"


def sanitize_filename(name: str) -> str:
    """Make ``name`` a single safe path component of at most 80 characters.

    Truncated names end in ``_`` plus 8 hex chars of the SHA-256 of the
    original name, so distinct long names stay distinct.
    """
    if not name:
        raise ValueError("empty file name")
    safe = _ILLEGAL.sub("_", name)
    if set(safe) == {"."}:
        safe = "_" * len(safe)
    if len(safe) <= MAX_COMPONENT:
        return safe
    digest = hashlib.sha256(name.encode("utf-8")).hexdigest()[:8]
    return safe[: MAX_COMPONENT - 9] + "_" + digest


def select_fetcher(url: str, hub_patterns: Iterable[str] = DEFAULT_HUB_PATTERNS) -> str:
    """Classify ``url`` as ``hub_pattern``, ``generic_http`` or ``scripted``."""
    parts = urlsplit(url)
    if not parts.scheme or not parts.netloc or any(c.isspace() for c in url):
        raise ValueError(f"malformed url: {url!r}")
    for pattern in hub_patterns:
        if re.match(pattern, url):
            return "hub_pattern"
    if parts.scheme in ("http", "https") and _FILE_LIKE.search(parts.path):
        return "generic_http"
    return "scripted"


def asset_name(url: str) -> str:
    parts = urlsplit(url)
    path = unquote(parts.path).rstrip("/")
    if parts.scheme == "hf":
        base = parts.netloc + "/" + path.lstrip("/")
    elif "huggingface.co" in parts.netloc:
        base = path.lstrip("/")
    else:
        base = PurePosixPath(path).name or parts.netloc
    return sanitize_filename(base)


# -- fetchers ----------------------------------------------------------------


class Fetcher(Protocol):
    supports_range: bool

    def fetch(
        self,
        url: str,
        dest: Path,
        *,
        offset: int,
        timeout: float,
        on_progress: Callable[[int], None],
    ) -> int:
        """Write ``url`` into ``dest`` starting at ``offset``; return final size.

        A fetcher that cannot honour ``offset`` truncates ``dest`` and starts
        over.  ``on_progress`` receives the cumulative byte count.
        """
        ...


class HttpFetcher:
    """Plain HTTP(S) with Range-based resumption and a wall-clock deadline."""

    supports_range = True

    def __init__(self, chunk_size: int = 64 * 1024, socket_timeout: float = 60.0):
        self.chunk_size = chunk_size
        self.socket_timeout = socket_timeout

    def fetch(self, url, dest, *, offset, timeout, on_progress):
        deadline = time.monotonic() + timeout
        req = Request(url)
        if offset:
            req.add_header("Range", f"bytes={offset}-")
        try:
            resp = urlopen(req, timeout=min(timeout, self.socket_timeout))
        except OSError as exc:
            raise FetchError(f"{url}: {exc}") from exc
        with resp:
            if offset and resp.status != 206:
                offset = 0  # server ignored the range; restart
            done = offset
            with open(dest, "r+b" if offset else "wb") as fh:
                fh.seek(offset)
                fh.truncate()
                while True:
                    if time.monotonic() > deadline:
                        raise FetchTimeout(f"{url}: exceeded {timeout}s")
                    try:
                        chunk = resp.read(self.chunk_size)
                    except OSError as exc:
                        raise FetchError(f"{url}: {exc}") from exc
                    if not chunk:
                        break
                    fh.write(chunk)
                    done += len(chunk)
                    on_progress(done)
        return done


class CommandFetcher:
    """Runs an external command per url (hub CLIs, generated scripts).

    ``template`` is an argv list whose items may contain ``{url}``,
    ``{dest}`` and ``{repo}`` placeholders.
    """

    supports_range = False

    def __init__(self, template: list[str]):
        self.template = template

    def fetch(self, url, dest, *, offset, timeout, on_progress):
        parts = urlsplit(url)
        repo = (parts.netloc + parts.path) if parts.scheme == "hf" else parts.path.strip("/")
        argv = [a.format(url=url, dest=str(dest), repo=repo) for a in self.template]
        try:
            subprocess.run(argv, check=True, timeout=timeout, capture_output=True)
        except subprocess.TimeoutExpired as exc:
            raise FetchTimeout(f"{url}: exceeded {timeout}s") from exc
        except (OSError, subprocess.CalledProcessError) as exc:
            raise FetchError(f"{url}: {exc}") from exc
        size = _tree_size(dest)
        on_progress(size)
        return size


class ScriptProvider(Protocol):
    def recipe(self, url: str) -> list[str]:
        """Return an argv that fetches ``url`` into the ``{dest}`` placeholder."""
        ...


class ScriptedFetcher:
    """Delegates unrecognised sources to a provider that writes a fetch recipe."""

    supports_range = False

    def __init__(self, provider: ScriptProvider | None = None):
        self.provider = provider

    def fetch(self, url, dest, *, offset, timeout, on_progress):
        if self.provider is None:
            raise FetchError(f"{url}: no script provider configured")
        argv = self.provider.recipe(url)
        return CommandFetcher(argv).fetch(url, dest, offset=0, timeout=timeout, on_progress=on_progress)


def _tree_size(path: Path) -> int:
    if path.is_file():
        return path.stat().st_size
    return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())


def default_fetchers(script_provider: ScriptProvider | None = None) -> dict[str, Fetcher]:
    return {
        "generic_http": HttpFetcher(),
        "hub_pattern": CommandFetcher(["huggingface-cli", "download", "{repo}", "--local-dir", "{dest}"]),
        "scripted": ScriptedFetcher(script_provider),
    }


# -- ledger ------------------------------------------------------------------


@dataclass(frozen=True)
class UrlState:
    url: str
    status: str
    local_path: str | None
    bytes_done: int
    seq: int


class UrlLedger:
    """Fold of ``url_ledger.jsonl``; all writes funnel through one lock."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._state: dict[str, UrlState] = {}
        if self.path is not None:
            _io.repair_torn_tail(self.path)
            for rec in _io.read_jsonl(self.path):
                rec.pop("ts", None)
                self._state[rec["url"]] = UrlState(**rec)

    def get(self, url: str) -> UrlState | None:
        return self._state.get(url)

    def snapshot(self) -> dict[str, UrlState]:
        return dict(self._state)

    def update(self, url: str, *, status: str, local_path: str | None, bytes_done: int, seq: int) -> UrlState:
        with self._lock:
            state = UrlState(url=url, status=status, local_path=local_path, bytes_done=bytes_done, seq=seq)
            if self.path is not None:
                rec = {
                    "url": url,
                    "status": status,
                    "local_path": local_path,
                    "bytes_done": bytes_done,
                    "seq": seq,
                    "ts": round(time.time(), 3),
                }
                _io.append_jsonl(self.path, rec)
            # replace the whole mapping so telemetry readers never see a partial update
            new = dict(self._state)
            new[url] = state
            self._state = new
            return state


# -- orchestration -----------------------------------------------------------


@dataclass(frozen=True)
class FetchPlan:
    entry: ResourceEntry
    fetcher: str
    dest_path: str  # relative to the assets dir
    timeout: float
    owner_seq: int


@dataclass(frozen=True)
class EntryResult:
    seq: int
    url: str
    status: str  # done | failed | skipped
    local_path: str | None
    bytes: int
    error: str | None = None


@dataclass(frozen=True)
class DownloadEvent:
    order: int
    kind: str  # paper_start | entry_start | entry_end | paper_end
    seq: int
    url: str | None = None
    status: str | None = None


@dataclass
class PaperProgress:
    seq: int
    bytes_done: int
    bytes_expected: int | None
    entry_status: dict[str, str] = field(default_factory=dict)

    @property
    def percent(self) -> float:
        if not self.bytes_expected:
            return 0.0
        return 100.0 * self.bytes_done / self.bytes_expected


@dataclass
class TelemetryReport:
    papers: dict[int, PaperProgress]
    bytes_done: int
    bytes_expected: int

    @property
    def percent(self) -> float:
        return 0.0 if not self.bytes_expected else 100.0 * self.bytes_done / self.bytes_expected


class DownloadOrchestrator:
    def __init__(
        self,
        registry: Registry,
        assets_dir: str | Path,
        ledger_path: str | Path | None = None,
        *,
        fetchers: dict[str, Fetcher] | None = None,
        hub_patterns: Iterable[str] = DEFAULT_HUB_PATTERNS,
        timeout: float = DEFAULT_TIMEOUT,
        checkpoint_bytes: int = 1 << 20,
    ):
        self.registry = registry
        self.assets_dir = Path(assets_dir)
        self.ledger = UrlLedger(ledger_path)
        self.fetchers = fetchers if fetchers is not None else default_fetchers()
        self.hub_patterns = tuple(hub_patterns)
        self.timeout = timeout
        self.checkpoint_bytes = checkpoint_bytes
        self.events: list[DownloadEvent] = []
        self.fetch_attempts: dict[str, int] = {}
        self._event_lock = threading.Lock()
        self._claim_lock = threading.Lock()
        self._inflight: dict[str, threading.Event] = {}
        self._live_bytes: dict[str, int] = {}
        self._abort = threading.Event()
        self._queue: list[int] = []
        self._results: dict[tuple[int, str], EntryResult] = {}

    # -- planning

    def plan(self, queue: Iterable[int]) -> list[FetchPlan]:
        """Fetch plans in admission order; a url's first owner fixes its path."""
        plans = []
        owners: dict[str, tuple[int, str]] = {}
        taken: dict[str, str] = {}  # dest -> url
        for state in self.ledger.snapshot().values():
            if state.local_path:
                owners.setdefault(state.url, (state.seq, state.local_path))
                taken[state.local_path] = state.url
        for seq in queue:
            for entry in self.registry.resources(seq):
                if entry.url not in owners:
                    dest = route_storage(entry) + asset_name(entry.url)
                    if taken.get(dest, entry.url) != entry.url:
                        name = asset_name(entry.url)
                        stem, dot, ext = name.rpartition(".")
                        tag = hashlib.sha256(entry.url.encode()).hexdigest()[:8]
                        alt = f"{stem}_{tag}.{ext}" if dot and stem else f"{name}_{tag}"
                        dest = route_storage(entry) + sanitize_filename(alt)
                    owners[entry.url] = (seq, dest)
                    taken[dest] = entry.url
                owner_seq, dest = owners[entry.url]
                plans.append(
                    FetchPlan(
                        entry=entry,
                        fetcher=select_fetcher(entry.url, self.hub_patterns),
                        dest_path=dest,
                        timeout=self.timeout,
                        owner_seq=owner_seq,
                    )
                )
        return plans

    # -- execution

    def _event(self, kind: str, seq: int, url: str | None = None, status: str | None = None) -> None:
        with self._event_lock:
            self.events.append(DownloadEvent(len(self.events), kind, seq, url, status))

    def execute_downloads(self, queue: Iterable[int], unit_concurrency: int = 4) -> list[EntryResult]:
        """Download every entry of the admitted ``queue``.

        Returns one result per (seq, entry) in admission order.  A
        :class:`~sotaengine._io.SimulatedCrash` in any worker aborts the
        whole run and is re-raised, modelling a killed process.
        """
        if unit_concurrency < 1:
            raise ValueError("unit_concurrency must be >= 1")
        queue = list(queue)
        self._queue = queue
        plans = self.plan(queue)
        by_seq: dict[int, list[FetchPlan]] = {seq: [] for seq in queue}
        for p in plans:
            by_seq[p.entry.seq].append(p)
        for d in ASSET_DIRS:
            (self.assets_dir / d).mkdir(parents=True, exist_ok=True)

        crash: list[BaseException] = []

        def run_paper(seq: int) -> None:
            if self._abort.is_set():
                return
            self._event("paper_start", seq)
            try:
                for p in by_seq[seq]:
                    if self._abort.is_set():
                        return
                    res = self._run_entry(p)
                    self._results[(seq, p.entry.url)] = res
                    self._sync_registry(res)
                self._mark_resourced(seq)
            except _io.SimulatedCrash as exc:
                self._abort.set()
                crash.append(exc)
            finally:
                self._event("paper_end", seq)

        with ThreadPoolExecutor(max_workers=unit_concurrency, thread_name_prefix="dl") as pool:
            futures = [pool.submit(run_paper, seq) for seq in queue]
            for f in futures:
                f.result()
        if crash:
            raise crash[0]
        return [self._results[(p.entry.seq, p.entry.url)] for p in plans]

    def _claim(self, url: str) -> threading.Event | None:
        """Return None if the caller now owns ``url``, else the owner's event."""
        with self._claim_lock:
            ev = self._inflight.get(url)
            if ev is not None:
                return ev
            self._inflight[url] = threading.Event()
            return None

    def _release(self, url: str) -> None:
        with self._claim_lock:
            ev = self._inflight.pop(url, None)
        if ev is not None:
            ev.set()

    def _run_entry(self, plan: FetchPlan) -> EntryResult:
        url, seq = plan.entry.url, plan.entry.seq
        while True:
            state = self.ledger.get(url)
            if state is not None and state.status == "done":
                # fetched earlier (this run or a previous one): reference it
                return EntryResult(seq, url, "skipped", state.local_path, state.bytes_done)
            waiting = self._claim(url)
            if waiting is None:
                break
            waiting.wait()
            if self._abort.is_set():
                raise _io.SimulatedCrash("aborted")
            state = self.ledger.get(url)
            if state is None or state.status != "done":
                # the other paper failed; it is not retried within this run
                return EntryResult(seq, url, "failed", None, 0, "duplicate url failed in another paper")
        try:
            self._event("entry_start", seq, url)
            res = self._fetch(plan)
            self._event("entry_end", seq, url, res.status)
            return res
        finally:
            self._release(url)

    def _fetch(self, plan: FetchPlan) -> EntryResult:
        url = plan.entry.url
        rel = plan.dest_path
        dest = self.assets_dir / rel
        part = dest.with_name(dest.name + ".part")
        fetcher = self.fetchers[plan.fetcher]
        prior = self.ledger.get(url)
        offset = 0
        if (
            prior is not None
            and prior.bytes_done > 0
            and fetcher.supports_range
            and part.is_file()
            and part.stat().st_size >= prior.bytes_done
        ):
            offset = prior.bytes_done
            with open(part, "r+b") as fh:
                fh.truncate(offset)
        elif part.exists():
            _remove(part)
        self.ledger.update(url, status="downloading", local_path=rel, bytes_done=offset, seq=plan.owner_seq)
        self._live_bytes[url] = offset
        last_ckpt = [offset]

        def on_progress(done: int) -> None:
            self._live_bytes[url] = done
            if self._abort.is_set():
                raise _io.SimulatedCrash("aborted")
            if done - last_ckpt[0] >= self.checkpoint_bytes:
                last_ckpt[0] = done
                self.ledger.update(url, status="downloading", local_path=rel, bytes_done=done, seq=plan.owner_seq)

        self.fetch_attempts[url] = self.fetch_attempts.get(url, 0) + 1
        try:
            size = fetcher.fetch(url, part, offset=offset, timeout=plan.timeout, on_progress=on_progress)
        except (FetchError, OSError) as exc:
            done = self._live_bytes.get(url, 0)
            logger.warning("seq %s: fetch of %s failed: %s", plan.entry.seq, url, exc)
            self.ledger.update(url, status="failed", local_path=rel, bytes_done=done, seq=plan.owner_seq)
            return EntryResult(plan.entry.seq, url, "failed", None, done, str(exc))
        if dest.exists():
            _remove(dest)
        os.replace(part, dest)
        self.ledger.update(url, status="done", local_path=rel, bytes_done=size, seq=plan.owner_seq)
        self._live_bytes[url] = size
        return EntryResult(plan.entry.seq, url, "done", rel, size)

    def _sync_registry(self, res: EntryResult) -> None:
        changes = {"status": res.status}
        if res.status in ("done", "skipped") and res.local_path:
            changes.update(local_path=res.local_path, bytes_recorded=res.bytes)
        try:
            self.registry.update_resource(res.seq, res.url, **changes)
        except KeyError:
            pass

    def _mark_resourced(self, seq: int) -> None:
        statuses = [self._results.get((seq, e.url)) for e in self.registry.resources(seq)]
        if all(r is not None and r.status in ("done", "skipped") for r in statuses):
            task = self.registry.task(seq)
            if task.stage == "ingested":
                self.registry.set_stage(seq, "resourced")

    # -- telemetry

    def telemetry_snapshot(self, seqs: Iterable[int] | None = None) -> TelemetryReport:
        """Read-only progress view; safe to call while transfers run."""
        ledger = self.ledger.snapshot()
        live = dict(self._live_bytes)
        if seqs is None:
            seqs = self._queue or sorted({s.seq for s in ledger.values()})
        papers: dict[int, PaperProgress] = {}
        for seq in seqs:
            entries = self.registry.resources(seq)
            done = 0
            status: dict[str, str] = {}
            for e in entries:
                st = ledger.get(e.url)
                res = self._results.get((seq, e.url))
                if st is None:
                    status[e.url] = res.status if res else "registered"
                    continue
                if st.status == "done":
                    done += st.bytes_done
                    status[e.url] = res.status if res else "done"
                else:
                    done += live.get(e.url, st.bytes_done)
                    status[e.url] = st.status
            papers[seq] = PaperProgress(seq, done, total_size(entries), status)
        return TelemetryReport(
            papers=papers,
            bytes_done=sum(p.bytes_done for p in papers.values()),
            bytes_expected=sum(p.bytes_expected or 0 for p in papers.values()),
        )


def _remove(path: Path) -> None:
    if path.is_dir():
        shutil.rmtree(path)
    else:
        path.unlink()
