"""Weight-conserving evaluation rubric built by breadth-first decomposition.

Weights are :class:`fractions.Fraction` values.  A decomposer never assigns
absolute weights: it returns child *fractions* that must sum to exactly one,
so conservation of the root weight is structural.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

from .errors import RubricError

logger = logging.getLogger(__name__)

RESULT_MATCH = "result_match"
KNOWN_CATEGORIES = ("result_match", "methodology_implementation", "environment_configuration")
TIER_SOURCES = {
    "shallow": ("table_of_contents", "abstract", "introduction"),
    "intermediate": ("methodology", "experiments", "visual_extracts"),
    "deep": ("repository_context",),
}
DEFAULT_BOUNDARIES = (1, 3)


@dataclass(frozen=True)
class PaperBundle:
    """Text parts of a paper and its repository, as ingested."""

    table_of_contents: str = ""
    abstract: str = ""
    introduction: str = ""
    methodology: str = ""
    experiments: str = ""
    visual_extracts: str = ""
    repository_context: str = ""

    @classmethod
    def from_dir(cls, path) -> PaperBundle:
        path = Path(path)
        parts = {}
        for name in cls.__dataclass_fields__:
            f = path / f"{name}.md"
            if f.is_file():
                parts[name] = f.read_text(encoding="utf-8")
        return cls(**parts)


@dataclass(frozen=True)
class ContextTier:
    tier: str
    sources: dict[str, str]


@dataclass
class RubricNode:
    id: str
    description: str
    category: str
    weight: Fraction
    depth: int
    children: list[RubricNode] = field(default_factory=list)
    leaf_criterion: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk_bfs(self) -> Iterator[RubricNode]:
        queue = deque([self])
        while queue:
            node = queue.popleft()
            yield node
            queue.extend(node.children)

    def leaves(self) -> list[RubricNode]:
        return [n for n in self.walk_bfs() if n.is_leaf]


@dataclass(frozen=True)
class Decomposition:
    """One proposed child: description, weight fraction of the parent."""

    description: str
    fraction: Fraction
    category: str | None = None
    criterion: str | None = None


class Decomposer(Protocol):
    def decompose(self, node: RubricNode, context: ContextTier) -> Sequence:
        """Children for ``node`` as :class:`Decomposition` items or tuples."""
        ...


def context_for_depth(
    depth: int,
    bundle: PaperBundle,
    boundaries: tuple[int, int] = DEFAULT_BOUNDARIES,
) -> ContextTier:
    d1, d2 = boundaries
    if not 0 <= d1 < d2:
        raise ValueError(f"tier boundaries must satisfy 0 <= d1 < d2, got {boundaries}")
    if depth <= d1:
        tier = "shallow"
    elif depth <= d2:
        tier = "intermediate"
    else:
        tier = "deep"
    return ContextTier(tier, {name: getattr(bundle, name) for name in TIER_SOURCES[tier]})


def _as_fraction(value) -> Fraction:
    if isinstance(value, float):
        # 0.1 means one tenth, not its binary approximation
        return Fraction(repr(value))
    return Fraction(value)


def _coerce(item, parent_category: str) -> Decomposition:
    if isinstance(item, Decomposition):
        d = item
    elif isinstance(item, dict):
        d = Decomposition(**item)
    else:
        d = Decomposition(*item)
    return Decomposition(
        description=d.description,
        fraction=_as_fraction(d.fraction),
        category=d.category or parent_category,
        criterion=d.criterion,
    )


def _validate(children: list[Decomposition]) -> str | None:
    if not children:
        return "no children"
    if any(c.fraction <= 0 for c in children):
        return "non-positive fraction"
    total = sum((c.fraction for c in children), Fraction(0))
    if total != 1:
        return f"fractions sum to {total}, not 1"
    return None


def _synthesized_criterion(node: RubricNode) -> str:
    return f"PASS iff: {node.description}"


def build_rubric(
    bundle: PaperBundle,
    decomposer: Decomposer,
    total_weight=Fraction(100),
    weight_threshold=Fraction(10),
    max_depth: int = 4,
    boundaries: tuple[int, int] = DEFAULT_BOUNDARIES,
    root_description: str = "Complete replication of the paper's main result",
    root_category: str = "other:replication",
) -> RubricNode:
    """Expand the rubric breadth-first until weight or depth stops growth.

    A node becomes a leaf when its weight is below ``weight_threshold`` or it
    sits at ``max_depth``.  Decomposer output violating the fraction rule, or
    a decomposer failure below the root, finalizes the node as a leaf.
    """
    total_weight = _as_fraction(total_weight)
    weight_threshold = _as_fraction(weight_threshold)
    if total_weight <= 0 or weight_threshold <= 0 or max_depth < 1:
        raise RubricError("need total_weight > 0, weight_threshold > 0, max_depth >= 1")

    root = RubricNode("R", root_description, root_category, total_weight, 0)
    queue = deque([root])
    while queue:
        node = queue.popleft()
        if node.weight < weight_threshold or node.depth >= max_depth:
            node.leaf_criterion = node.leaf_criterion or _synthesized_criterion(node)
            continue
        context = context_for_depth(node.depth, bundle, boundaries)
        try:
            raw = list(decomposer.decompose(node, context))
            children = [_coerce(item, node.category) for item in raw]
        except Exception as exc:
            if node is root:
                raise RubricError(f"decomposer failed on the root: {exc}") from exc
            logger.warning("decomposer failed on %s (%s); node kept as leaf", node.id, exc)
            node.leaf_criterion = node.leaf_criterion or _synthesized_criterion(node)
            continue
        problem = _validate(children)
        if problem is not None:
            logger.warning("rejected decomposition of %s: %s; node kept as leaf", node.id, problem)
            node.leaf_criterion = node.leaf_criterion or _synthesized_criterion(node)
            continue
        for i, c in enumerate(children, start=1):
            child = RubricNode(
                id=f"{node.id}.{i}",
                description=c.description,
                category=c.category,
                weight=node.weight * c.fraction,
                depth=node.depth + 1,
                leaf_criterion=c.criterion,
            )
            node.children.append(child)
            queue.append(child)
        # an internal node carries no criterion of its own
        node.leaf_criterion = None
    return root


def flatten_result_match(root: RubricNode) -> list[tuple[str, str, Fraction]]:
    """Result-match leaves in breadth-first order as (id, criterion, weight)."""
    return [
        (n.id, n.leaf_criterion, n.weight)
        for n in root.walk_bfs()
        if n.is_leaf and n.category == RESULT_MATCH
    ]


def check_invariants(root: RubricNode, max_depth: int, weight_threshold=None) -> list[str]:
    """Return a list of violated rubric invariants (empty when valid)."""
    problems = []
    for n in root.walk_bfs():
        if n.is_leaf != (n.leaf_criterion is not None):
            problems.append(f"{n.id}: leaf/criterion mismatch")
        if n.depth > max_depth:
            problems.append(f"{n.id}: depth {n.depth} > {max_depth}")
        if n.children:
            if sum((c.weight for c in n.children), Fraction(0)) != n.weight:
                problems.append(f"{n.id}: children weights do not sum to parent")
            for c in n.children:
                if c.depth != n.depth + 1:
                    problems.append(f"{c.id}: depth not parent+1")
    return problems


# -- serialization -------------------------------------------------------------


def _w(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def to_dict(node: RubricNode) -> dict:
    d = {
        "id": node.id,
        "description": node.description,
        "category": node.category,
        "weight": _w(node.weight),
        "depth": node.depth,
        "leaf_criterion": node.leaf_criterion,
        "children": [to_dict(c) for c in node.children],
    }
    return d


def from_dict(d: dict) -> RubricNode:
    return RubricNode(
        id=d["id"],
        description=d["description"],
        category=d["category"],
        weight=Fraction(d["weight"]),
        depth=d["depth"],
        children=[from_dict(c) for c in d.get("children", [])],
        leaf_criterion=d.get("leaf_criterion"),
    )


def to_csv(root: RubricNode) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "parent", "depth", "category", "weight", "criterion"])
    parents = {}
    for n in root.walk_bfs():
        for c in n.children:
            parents[c.id] = n.id
        writer.writerow([n.id, parents.get(n.id, ""), n.depth, n.category, _w(n.weight), n.leaf_criterion or ""])
    return buf.getvalue()


# -- built-in decomposers ----------------------------------------------------------


class ScriptedDecomposer:
    """Replays fixed splits; ``splits`` maps node id or depth to child specs.

    Used by tests and by ``rubric`` runs over bundles carrying a
    ``decomposition.json`` file.
    """

    def __init__(self, splits: dict, default: Sequence | None = None):
        self.splits = splits
        self.default = default
        self.calls: list[tuple[str, str]] = []

    def decompose(self, node, context):
        self.calls.append((node.id, context.tier))
        for key in (node.id, node.depth, str(node.depth)):
            if key in self.splits:
                return self.splits[key]
        if self.default is not None:
            return self.default
        return []


class OutlineDecomposer:
    """Deterministic fallback that splits a node along its tier's text outline.

    The root splits into the three standard categories (result match gets
    half the weight); deeper nodes split evenly across up to ``fanout``
    headings or bullet lines found in the context injected at that depth.
    """

    ROOT_SPLIT = (
        ("Reproduce the reported main results", Fraction(1, 2), RESULT_MATCH),
        ("Implement the described methodology", Fraction(3, 10), "methodology_implementation"),
        ("Configure the experimental environment", Fraction(1, 5), "environment_configuration"),
    )

    def __init__(self, fanout: int = 3):
        self.fanout = fanout

    def decompose(self, node, context):
        if node.depth == 0:
            return [Decomposition(d, f, c) for d, f, c in self.ROOT_SPLIT]
        items = list(_outline_items(context.sources.values()))
        if not items:
            return []
        picked = items[(node.depth - 1) % len(items):][: self.fanout] or items[: self.fanout]
        share = Fraction(1, len(picked))
        return [Decomposition(f"{node.description}: {text}", share) for text in picked]


def _outline_items(texts: Iterable[str]) -> Iterator[str]:
    for text in texts:
        for line in text.splitlines():
            s = line.strip()
            if s.startswith(("#", "-", "*")):
                s = s.lstrip("#-* ").strip()
                if s:
                    yield s[:120]
