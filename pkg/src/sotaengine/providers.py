"""Deterministic stand-ins for the pluggable intelligence providers.

Real deployments wire language-model backed providers with the same
methods; these scripted ones drive the simulation backend and the tests.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

from .failure import RepairAction
from .harness import SIM_FILE, grid_points, read_sim_config
from .ideas import Hypothesis

logger = logging.getLogger(__name__)


class GridIdeator:
    """Proposes every point of the knob grid, in lexicographic order.

    Each idea is a LOW-risk PARAM change carrying a full knob assignment.
    Leap candidates are the next cleared grid ideas, retyped as ALGO.
    """

    def __init__(self, grid: dict[str, list]):
        self.points = grid_points(grid)

    @classmethod
    def from_workspace(cls, workspace: str | Path) -> GridIdeator:
        return cls(read_sim_config(workspace)["grid"])

    def propose(self, task, count, round):
        if round > 0:
            return []
        width = len(str(len(self.points)))
        out = []
        for i, point in enumerate(self.points):
            label = ", ".join(f"{k}={v}" for k, v in point.items())
            out.append(Hypothesis(
                id=f"G{i:0{width}d}",
                title=f"set {label}",
                type="PARAM",
                priority=i,
                description=f"Evaluate the configuration {label}.",
                granularity="micro",
                risk="LOW",
                assumptions="the knob landscape is deterministic",
                patch={"kind": "knobs", "set": dict(point)},
            ))
        return out

    def leap_candidates(self, history, library, count):
        entries = [e for e in history if getattr(e, "idea_id", None)]
        n = len(entries)
        return [
            replace(h, id=f"L{n}-{h.id}", type="ALGO", granularity="macro", risk="HIGH", status="proposed",
                    outcome_iterations=[], title="restructure: " + h.title)
            for h in library.cleared()[:count]
        ]


class ScriptedIdeator:
    """Replays a fixed idea list; later rounds and leaps come from scripts."""

    def __init__(self, ideas: Sequence, reideation: Sequence = (), leaps: Sequence[Sequence] = ()):
        self.ideas = [_as_hypothesis(h) for h in ideas]
        self.reideation = [_as_hypothesis(h) for h in reideation]
        self.leaps = [[_as_hypothesis(h) for h in batch] for batch in leaps]
        self.leap_calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedIdeator:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("ideas", []), data.get("reideation", []), data.get("leaps", []))

    def propose(self, task, count, round):
        if round == 0:
            return list(self.ideas)
        if round == 1:
            return list(self.reideation)
        return []

    def leap_candidates(self, history, library, count):
        if self.leap_calls >= len(self.leaps):
            return []
        batch = self.leaps[self.leap_calls]
        self.leap_calls += 1
        return list(batch)[:count]


def _as_hypothesis(item) -> Hypothesis:
    if isinstance(item, Hypothesis):
        return item
    if isinstance(item, tuple):
        # (hypothesis, alignment report) proposal pair
        return (_as_hypothesis(item[0]), item[1])
    return Hypothesis.from_dict(item)


class StaticAnalyzer:
    """Returns a fixed analysis and constraint list."""

    def __init__(self, entry_points: Iterable[str] = (), constraints: Iterable = (), notes: str = "", runtime: str = "unknown"):
        self.entry_points = list(entry_points)
        self._constraints = list(constraints)
        self.notes = notes
        self.runtime = runtime

    def analyze(self, task, workspace) -> dict:
        return {
            "pipeline": self.notes or "data -> model -> evaluation",
            "entry_points": self.entry_points,
            "runtime_estimate": self.runtime,
            "parameters": [],
        }

    def constraints(self, task):
        return list(self._constraints)


class SimAnalyzer(StaticAnalyzer):
    """Analyzer for simulation workspaces: one entry point, the declared knobs."""

    def __init__(self, workspace: str | Path):
        cfg = read_sim_config(workspace)
        super().__init__(["sim-eval " + SIM_FILE], cfg.get("constraints", []), "sim.json knobs -> score", "instant")
        self.knobs = sorted(cfg["knobs"])

    def analyze(self, task, workspace) -> dict:
        out = super().analyze(task, workspace)
        out["parameters"] = self.knobs
        return out


class HintImproviser:
    """Improvises repairs from a static list of labels, skipping ones already tried."""

    def __init__(self, labels: Sequence[str] = ()):
        self.labels = list(labels)

    @classmethod
    def from_workspace(cls, workspace: str | Path) -> HintImproviser:
        try:
            return cls(read_sim_config(workspace).get("repair_hints", []))
        except Exception:
            return cls()

    def improvise(self, signature, result, tried: set[str]):
        for label in self.labels:
            action = RepairAction(label)
            if action.key not in tried:
                return action
        return None
