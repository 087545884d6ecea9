from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _fixtures import RandomDecomposer, path_product_weight
from sotaengine.errors import RubricError
from sotaengine.rubric import (
    OutlineDecomposer,
    PaperBundle,
    ScriptedDecomposer,
    build_rubric,
    check_invariants,
    context_for_depth,
    flatten_result_match,
    from_dict,
    to_csv,
    to_dict,
)

BUNDLE = PaperBundle(
    table_of_contents="1 Intro\n2 Method",
    abstract="abstract",
    methodology="# Encoder\n- attention\n- pooling\n",
    experiments="# Results\n- table 1\n",
    repository_context="- train.py\n- eval.py\n",
)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.sampled_from(["100", "1", "7/3"]), st.sampled_from(["10", "1/50", "3"]))
def test_leaf_weights_conserve_total(seed, max_depth, total, threshold):
    dec = RandomDecomposer(random.Random(seed))
    root = build_rubric(BUNDLE, dec, Fraction(total), Fraction(threshold), max_depth)
    leaves = root.leaves()
    assert sum(n.weight for n in leaves) == Fraction(total)
    assert check_invariants(root, max_depth) == []
    for leaf in leaves:
        assert leaf.weight == path_product_weight(leaf.id, dec.fractions, total)
        assert leaf.leaf_criterion


def test_scripted_split_and_result_match_flattening():
    dec = ScriptedDecomposer({
        "R": [("results", "1/2", "result_match"), ("method", "1/2", "methodology_implementation")],
        "R.1": [("table 1", "3/4"), ("table 2", "1/4", None, "PASS iff: within 1%")],
    })
    root = build_rubric(BUNDLE, dec, 100, 10, 4)
    assert flatten_result_match(root) == [
        ("R.1.1", "PASS iff: table 1", Fraction(75, 2)),
        ("R.1.2", "PASS iff: within 1%", Fraction(25, 2)),
    ]


def test_invalid_decomposition_keeps_node_as_leaf(caplog):
    dec = ScriptedDecomposer({"R": [("a", "1/2"), ("b", "1/3")]})
    root = build_rubric(BUNDLE, dec, 100, 10, 3)
    assert root.is_leaf and root.leaf_criterion.startswith("PASS iff")
    assert "not 1" in caplog.text


def test_root_decomposer_failure_is_fatal():
    class Boom:
        def decompose(self, node, context):
            raise RuntimeError("provider down")

    with pytest.raises(RubricError):
        build_rubric(BUNDLE, Boom())


def test_non_root_failure_is_local():
    class FailDeep:
        def decompose(self, node, context):
            if node.depth > 0:
                raise RuntimeError("x")
            return [("a", "1/2"), ("b", "1/2")]

    root = build_rubric(BUNDLE, FailDeep(), 100, 10, 4)
    assert [c.is_leaf for c in root.children] == [True, True]


def test_float_fractions_are_read_as_decimals():
    root = build_rubric(BUNDLE, ScriptedDecomposer({"R": [("a", 0.1), ("b", 0.9)]}), 100, 50, 2)
    assert [c.weight for c in root.children] == [10, 90]


@pytest.mark.parametrize("depth,tier", [(0, "shallow"), (1, "shallow"), (2, "intermediate"), (3, "intermediate"), (4, "deep")])
def test_context_tiers(depth, tier):
    ctx = context_for_depth(depth, BUNDLE)
    assert ctx.tier == tier
    if tier == "deep":
        assert set(ctx.sources) == {"repository_context"}


def test_context_boundaries_validated():
    with pytest.raises(ValueError):
        context_for_depth(0, BUNDLE, (3, 1))


def test_tier_seen_by_decomposer_matches_depth():
    dec = ScriptedDecomposer({}, default=[("x", "1/2"), ("y", "1/2")])
    build_rubric(BUNDLE, dec, 1000, 1, 5, boundaries=(1, 3))
    for node_id, tier in dec.calls:
        depth = node_id.count(".")
        assert tier == context_for_depth(depth, BUNDLE, (1, 3)).tier


def test_serialization_round_trip():
    root = build_rubric(BUNDLE, OutlineDecomposer(), 100, 10, 4)
    assert to_dict(from_dict(to_dict(root))) == to_dict(root)
    rows = to_csv(root).splitlines()
    assert rows[0] == "id,parent,depth,category,weight,criterion"
    assert len(rows) == 1 + sum(1 for _ in root.walk_bfs())


def test_outline_decomposer_is_deterministic():
    a = to_dict(build_rubric(BUNDLE, OutlineDecomposer(), 100, 10, 4))
    b = to_dict(build_rubric(BUNDLE, OutlineDecomposer(), 100, 10, 4))
    assert a == b and len(a["children"]) == 3


@pytest.mark.parametrize("bad", [dict(total_weight=0), dict(weight_threshold=0), dict(max_depth=0)])
def test_bad_parameters(bad):
    with pytest.raises(RubricError):
        build_rubric(BUNDLE, OutlineDecomposer(), **bad)
