"""Command-line interface.

Exit status: 0 success, 1 task failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path

from . import _io
from .config import EngineConfig, load_config, merge_flags, resolve_state_dir
from .download import DEFAULT_HUB_PATTERNS, DownloadOrchestrator
from .errors import ConfigError, CorruptStateError, EngineError, InvalidTransitionError, UnknownTaskError
from .failure import FailureMemory, FailureSignature, promote
from .harness import FilePlanner, ProcessBackend, SimPlanner, SimulationBackend
from .loop import LoopConfig, OptimizationLoop, TaskPaths, export_bundle
from .providers import GridIdeator, HintImproviser, ScriptedIdeator, SimAnalyzer, StaticAnalyzer
from .registry import (
    TERMINAL_STAGES,
    MetricDescriptor,
    PaperTask,
    ReadinessVerdict,
    Registry,
    ResourceEntry,
    gate_tasks,
)
from .rubric import DEFAULT_BOUNDARIES, OutlineDecomposer, PaperBundle, ScriptedDecomposer, build_rubric, flatten_result_match, to_csv, to_dict
from .scheduler import FleetScheduler, ProcessLauncher, read_state
from .vcs import parse_ledger

logger = logging.getLogger("sotaengine")

EXIT_OK, EXIT_TASK_FAILED, EXIT_USAGE = 0, 1, 2


class Layout:
    """Paths under the state directory."""

    def __init__(self, root: Path, out_dir: str | None = None):
        self.root = root
        self.out = Path(out_dir) if out_dir else root / "out"

    @property
    def registry(self) -> Path:
        return self.root / "registry"

    @property
    def assets(self) -> Path:
        return self.root / "assets"

    @property
    def url_ledger(self) -> Path:
        return self.root / "downloads" / "url_ledger.jsonl"

    @property
    def scheduler_state(self) -> Path:
        return self.root / "scheduler_state.json"

    @property
    def global_memory(self) -> Path:
        return self.root / "failure_memory_global.jsonl"

    def task_dir(self, seq: int) -> Path:
        return self.root / str(seq)

    def task_paths(self, seq: int) -> TaskPaths:
        return TaskPaths(self.task_dir(seq) / "run", self.root / "snapshots" / str(seq))


# -- output ------------------------------------------------------------------------------


class Output:
    def __init__(self, fmt: str, stream=None):
        self.fmt = fmt
        self.stream = stream or sys.stdout

    def records(self, rows: list[dict], columns: list[str]) -> None:
        if self.fmt == "records":
            for row in rows:
                self.stream.write(_io.dumps_line(row) + "\n")
            return
        widths = [max([len(c)] + [len(_cell(r.get(c))) for r in rows]) for c in columns]
        self.stream.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
        for r in rows:
            self.stream.write("  ".join(_cell(r.get(c)).ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")

    def message(self, text: str, **record) -> None:
        if self.fmt == "records":
            self.stream.write(_io.dumps_line({"message": text, **record}) + "\n")
        else:
            self.stream.write(text + "\n")


def _cell(v) -> str:
    return "" if v is None else str(v)


# -- commands -------------------------------------------------------------------------------


def cmd_ingest(args, cfg: EngineConfig, layout: Layout, out: Output) -> int:
    src = Path(args.dir)
    if not src.is_dir():
        raise ConfigError(f"{src} is not a directory")
    registry = Registry.load(layout.registry)
    task_files = sorted(src.glob("*/task.json"), key=lambda p: _seq_key(p.parent.name))
    rows = []
    for tf in task_files:
        spec = json.loads(tf.read_text(encoding="utf-8"))
        seq = int(spec["seq"])
        if seq in registry:
            rows.append({"seq": seq, "result": "already_registered"})
            continue
        task = PaperTask(
            seq=seq,
            conference=spec.get("conference", ""),
            title=spec.get("title", ""),
            repo_ref=spec.get("repo_ref", ""),
            target_metric=MetricDescriptor.from_dict(spec["target_metric"]),
        )
        tdir = layout.task_dir(seq)
        if (tf.parent / "workspace").is_dir():
            if (tdir / "source").exists():
                shutil.rmtree(tdir / "source")
            shutil.copytree(tf.parent / "workspace", tdir / "source", symlinks=True)
        if (tf.parent / "sections").is_dir():
            if (tdir / "paper").exists():
                shutil.rmtree(tdir / "paper")
            shutil.copytree(tf.parent / "sections", tdir / "paper")
        _io.atomic_write_json(tdir / "task.json", spec)
        registry.add_task(task)
        if spec.get("readiness"):
            registry.set_readiness(seq, ReadinessVerdict(**spec["readiness"]))
        delta = registry.register_resources(seq, [
            ResourceEntry(seq, r["url"], r.get("taxonomy", "misc"), r.get("size_estimate_bytes"))
            for r in spec.get("resources", [])
        ])
        rows.append({"seq": seq, "result": "ingested", "resources": len(delta.added), "duplicates": len(delta.duplicates)})
    out.records(rows, ["seq", "result", "resources", "duplicates"])
    return EXIT_OK


def _seq_key(name: str):
    return (0, int(name), name) if name.isdigit() else (1, 0, name)


def cmd_download(args, cfg, layout, out) -> int:
    registry = Registry.load(layout.registry)
    history = [t.seq for t in registry.tasks() if t.stage in TERMINAL_STAGES]
    gate = gate_tasks(registry, cfg.size_min, cfg.size_max, history)
    for seq, reason in gate.excluded.items():
        logger.info("seq %s excluded: %s", seq, reason)
    orch = DownloadOrchestrator(
        registry, layout.assets, layout.url_ledger,
        hub_patterns=cfg.hub_patterns or DEFAULT_HUB_PATTERNS, timeout=cfg.download_timeout,
    )
    results = orch.execute_downloads(gate.admitted, cfg.concurrency)
    rows = [
        {"seq": r.seq, "url": r.url, "status": r.status, "path": r.local_path, "bytes": r.bytes, "error": r.error}
        for r in results
    ]
    rows += [{"seq": seq, "status": f"excluded:{reason}"} for seq, reason in gate.excluded.items()]
    out.records(rows, ["seq", "status", "url", "path", "bytes", "error"])
    return EXIT_TASK_FAILED if any(r.status == "failed" for r in results) else EXIT_OK


def cmd_rubric(args, cfg, layout, out) -> int:
    registry = Registry.load(layout.registry)
    task = registry.task(args.seq)
    paper_dir = layout.task_dir(args.seq) / "paper"
    bundle = PaperBundle.from_dir(paper_dir)
    script = paper_dir / "decomposition.json"
    if script.is_file():
        data = json.loads(script.read_text(encoding="utf-8"))
        decomposer = ScriptedDecomposer(data.get("splits", {}), data.get("default"))
    else:
        decomposer = OutlineDecomposer()
    root = build_rubric(
        bundle,
        decomposer,
        total_weight=Fraction(cfg.total_weight),
        weight_threshold=Fraction(cfg.weight_threshold),
        max_depth=cfg.max_depth,
        boundaries=tuple(cfg.tier_boundaries or DEFAULT_BOUNDARIES),
    )
    tdir = layout.task_dir(args.seq)
    _io.atomic_write_text(tdir / "rubric.json", _io.dumps_pretty(to_dict(root)))
    _io.atomic_write_text(tdir / "rubric.csv", to_csv(root))
    _advance_stage(registry, task.seq, "rubric_built")
    rows = [{"id": i, "weight": f"{w.numerator}/{w.denominator}", "criterion": c} for i, c, w in flatten_result_match(root)]
    out.records(rows, ["id", "weight", "criterion"])
    return EXIT_OK


def _advance_stage(registry: Registry, seq: int, stage: str) -> None:
    try:
        registry.set_stage(seq, stage)
    except InvalidTransitionError as exc:
        logger.info("seq %s stage left as is: %s", seq, exc)


def _decimal_or_none(value) -> Decimal | None:
    if value is None:
        return None
    try:
        return Decimal(str(value))
    except InvalidOperation:
        raise ConfigError(f"not a number: {value!r}") from None


def build_loop(seq: int, cfg: EngineConfig, layout: Layout, devices=()) -> OptimizationLoop:
    registry = Registry.load(layout.registry)
    task = registry.task(seq)
    tdir = layout.task_dir(seq)
    source = tdir / "source"
    if not source.is_dir():
        raise ConfigError(f"task {seq} has no ingested workspace")
    spec = _io.load_json(tdir / "task.json", {}) or {}
    paths = layout.task_paths(seq)
    for stale in (paths.run_dir, paths.snapshot_dir):
        if stale.exists():
            shutil.rmtree(stale)
    paths.run_dir.mkdir(parents=True)
    shutil.copytree(source, paths.workspace, symlinks=True)

    metric = task.target_metric
    default_tol = "0" if cfg.backend == "sim" else "0.01"
    loop_cfg = LoopConfig(
        max_iterations=cfg.max_iterations,
        success_threshold=_decimal_or_none(cfg.success_threshold),
        debug_budget=cfg.debug_budget,
        leap_window=cfg.leap_window,
        honeymoon_length=cfg.honeymoon_length,
        metric_direction=metric.direction,
        primary_metric=metric.name,
        min_ideas=cfg.min_ideas,
        eval_timeout=cfg.eval_timeout,
        final_tolerance=_decimal_or_none(cfg.final_tolerance or default_tol),
        r4_tolerance=_decimal_or_none(cfg.r4_tolerance),
        wall_clock_limit=cfg.wall_clock_limit,
    )
    if cfg.backend == "sim":
        backend = SimulationBackend(cfg.seed)
        planner = SimPlanner(paths.workspace)
        analyzer = SimAnalyzer(paths.workspace)
        improviser = HintImproviser.from_workspace(paths.workspace)
        ideator = ScriptedIdeator(spec["ideas"], spec.get("reideation", []), spec.get("leaps", [])) if spec.get("ideas") else GridIdeator.from_workspace(paths.workspace)
    elif cfg.backend == "adapter":
        if not spec.get("ideas"):
            raise ConfigError(f"task {seq}: the adapter backend needs scripted ideas in task.json")
        backend = ProcessBackend(metric.name)
        planner = FilePlanner(paths.workspace)
        analyzer = StaticAnalyzer(constraints=spec.get("constraints", []))
        improviser = HintImproviser(spec.get("repair_hints", []))
        ideator = ScriptedIdeator(spec["ideas"], spec.get("reideation", []), spec.get("leaps", []))
    else:
        raise ConfigError(f"unknown backend {cfg.backend!r}")
    global_mem = FailureMemory(layout.global_memory, "global")
    return OptimizationLoop(
        task, paths, loop_cfg, backend, ideator, analyzer, planner,
        improviser=improviser, global_memory=global_mem, devices=devices,
    )


def cmd_optimize(args, cfg, layout, out) -> int:
    devices = tuple(int(d) for d in args.devices.split(",")) if args.devices else ()
    loop = build_loop(args.seq, cfg, layout, devices)
    registry = None
    if not args.no_registry_update:
        registry = Registry.load(layout.registry)
        _advance_stage(registry, args.seq, "optimizing")
    outcome = loop.run(layout.out)
    if registry is not None:
        _advance_stage(registry, args.seq, outcome.stage)
    out.records([{
        "seq": outcome.seq,
        "stage": outcome.stage,
        "best": None if outcome.best_value is None else str(outcome.best_value),
        "iterations": outcome.iterations,
        "stop_reason": outcome.stop_reason,
        "bundle": None if outcome.bundle is None else str(outcome.bundle),
        "warning": outcome.warning,
    }], ["seq", "stage", "best", "iterations", "stop_reason", "bundle", "warning"])
    return EXIT_OK if outcome.stage == "finalized" else EXIT_TASK_FAILED


def _launcher(args, cfg: EngineConfig, layout: Layout) -> ProcessLauncher:
    extra = ["--no-registry-update"]
    if args.config:
        extra = ["--config", str(Path(args.config).resolve())] + extra
    extra += ["--backend", cfg.backend, "--seed", str(cfg.seed)]
    return ProcessLauncher(layout.root.resolve(), layout.out.resolve(), extra)


def _sync_registry_stages(layout: Layout, stages: dict[int, str]) -> None:
    registry = Registry.load(layout.registry)
    for seq, stage in stages.items():
        if stage in TERMINAL_STAGES and seq in registry:
            _advance_stage(registry, seq, stage)


def cmd_fleet_run(args, cfg, layout, out) -> int:
    registry = Registry.load(layout.registry)
    sched = FleetScheduler(layout.scheduler_state, _launcher(args, cfg, layout), cfg.units, cfg.devices_per_unit)
    if len(sched.state["units"]) != cfg.units:
        logger.info("scheduler state has %d units; keeping the persisted layout", len(sched.state["units"]))
    pending = [t.seq for t in registry.tasks() if t.stage not in TERMINAL_STAGES]
    sched.submit(pending)
    stages = sched.run(interval=cfg.poll_interval)
    _sync_registry_stages(layout, stages)
    rows = [{"seq": s, "stage": st} for s, st in stages.items()]
    out.records(rows, ["seq", "stage"])
    return EXIT_OK if all(st == "finalized" for st in stages.values()) else EXIT_TASK_FAILED


def cmd_status(args, cfg, layout, out) -> int:
    # read-only: nothing here may create or modify files
    registry = Registry.load(layout.registry) if layout.registry.is_dir() else Registry()
    sched = read_state(layout.scheduler_state)
    sched_tasks = sched["tasks"] if sched else {}
    rows = []
    for task in registry.tasks():
        if args.seq is not None and task.seq != args.seq:
            continue
        paths = layout.task_paths(task.seq)
        st = _io.load_json(paths.loop_state, {}) or {}
        entries = parse_ledger(paths.scores) if paths.scores.is_file() else []
        s = sched_tasks.get(str(task.seq), {})
        rows.append({
            "seq": task.seq,
            "stage": task.stage,
            "fleet": s.get("stage"),
            "unit": s.get("unit"),
            "phase": st.get("phase"),
            "iterations": max(len(entries) - 1, 0) if entries else None,
            "best": st.get("best_value"),
        })
    out.records(rows, ["seq", "stage", "fleet", "unit", "phase", "iterations", "best"])
    return EXIT_OK


def cmd_recover(args, cfg, layout, out) -> int:
    state = read_state(layout.scheduler_state)
    if state is None:
        out.message("no scheduler state; nothing to recover")
        return EXIT_OK
    sched = FleetScheduler(layout.scheduler_state, _launcher(args, cfg, layout))
    changes = sched.recover()
    _sync_registry_stages(layout, sched.stages())
    out.records([{"seq": s, "result": r} for s, r in changes.items()], ["seq", "result"])
    return EXIT_OK


def cmd_export(args, cfg, layout, out) -> int:
    paths = layout.task_paths(args.seq)
    st = _io.load_json(paths.loop_state)
    if not st or not st.get("final"):
        out.message(f"task {args.seq} has no finalized run to export")
        return EXIT_TASK_FAILED
    target = export_bundle(paths, layout.out, args.seq, st["final"])
    out.message(f"exported {target}", seq=args.seq, bundle=str(target))
    return EXIT_OK


def cmd_promote(args, cfg, layout, out) -> int:
    try:
        sig = FailureSignature.parse(args.signature)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    global_mem = FailureMemory(layout.global_memory, "global")
    copied = 0
    for path in sorted(layout.root.glob("*/run/failure_memory_local.jsonl")):
        copied += promote(FailureMemory(path, "local"), global_mem, sig, args.action)
    if not copied:
        out.message(f"no local record of {args.action} for {sig}")
        return EXIT_TASK_FAILED
    out.message(f"promoted {copied} outcome(s) of {args.action} for {sig}", copied=copied)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state-dir", default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON configuration file")
    common.add_argument("--format", choices=("table", "records"), default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="sotaengine", parents=[common], description="Paper-to-optimized-code orchestration engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="register tasks from a fixture directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("download", parents=[common], help="gate tasks and fetch their resources")
    p.add_argument("--size-min", type=int, dest="size_min")
    p.add_argument("--size-max", type=int, dest="size_max")
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=cmd_download)

    p = sub.add_parser("rubric", parents=[common], help="build the replication rubric of a task")
    p.add_argument("seq", type=int)
    p.add_argument("--total-weight", dest="total_weight")
    p.add_argument("--threshold", dest="weight_threshold")
    p.add_argument("--max-depth", type=int, dest="max_depth")
    p.set_defaults(func=cmd_rubric)

    p = sub.add_parser("optimize", parents=[common], help="run the optimization loop of one task")
    p.add_argument("seq", type=int)
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--success-threshold", dest="success_threshold")
    p.add_argument("--backend", choices=("sim", "adapter"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--devices", help="comma-separated device ids")
    p.add_argument("--no-registry-update", action="store_true", dest="no_registry_update")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("fleet", parents=[common], help="fleet scheduling")
    fleet = p.add_subparsers(dest="fleet_command", required=True)
    f = fleet.add_parser("run", parents=[common], help="run every pending task on compute units")
    f.add_argument("--units", type=int)
    f.add_argument("--devices-per-unit", type=int, dest="devices_per_unit")
    f.add_argument("--poll-interval", type=float, dest="poll_interval")
    f.add_argument("--backend", choices=("sim", "adapter"))
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fleet_run)

    p = sub.add_parser("status", parents=[common], help="show task and fleet status (read-only)")
    p.add_argument("--seq", type=int)
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("recover", parents=[common], help="reconcile scheduler state after a crash")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("export", parents=[common], help="re-export the optimized bundle of a task")
    p.add_argument("seq", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("promote-skill", parents=[common], help="copy a local repair record into global memory")
    p.add_argument("signature", help="class:fingerprint")
    p.add_argument("action", help="repair action label")
    p.set_defaults(func=cmd_promote)
    return parser


FLAG_KEYS = (
    "state_dir", "size_min", "size_max", "concurrency", "total_weight", "weight_threshold", "max_depth",
    "max_iterations", "success_threshold", "backend", "seed", "out_dir", "units", "devices_per_unit", "poll_interval",
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    for name, default in (("state_dir", None), ("config", None), ("format", "table"), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    out = Output(args.format)
    try:
        cfg = merge_flags(load_config(args.config), {k: getattr(args, k, None) for k in FLAG_KEYS})
        layout = Layout(resolve_state_dir(cfg), cfg.out_dir)
        return args.func(args, cfg, layout, out)
    except (ConfigError, CorruptStateError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except UnknownTaskError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except EngineError as exc:
        sys.stderr.write(f"task failure: {exc}\n")
        return EXIT_TASK_FAILED


if __name__ == "__main__":
    sys.exit(main())
