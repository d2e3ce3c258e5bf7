import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specedge.draft import (ROOT, DraftParams, DraftTree, best_path, build_draft_tree, deserialize_tree,
                            empty_tree, serialize_tree)
from specedge.errors import DecodeError
from specedge.lm import NGramModel, TableModel

from strategies import models

Q = TableModel([0.5, 0.25, 0.125, 0.125])


def brute_force_tree(q, budget, depth):
    """Independent oracle: rank every path of length <= depth by cumulative
    logprob (shallower first on ties, then lexicographic) and grow the kept set
    one level at a time, the way pooled pruning does."""
    kept = set()
    frontier = [()]
    for _ in range(depth):
        cands = [p + (t,) for p in frontier for t in np.argsort(-q, kind="stable")[:2] if q[t] > 0]
        pool = list(kept) + cands
        score = lambda p: (-round(sum(math.log(q[t]) for t in p), 12), len(p), p)
        keep = sorted(pool, key=score)[:budget]
        frontier = [p for p in keep if p in cands]
        kept = set(keep)
    return kept


def test_depth_one_budget_one_is_argmax():
    tree = build_draft_tree(Q, [0], DraftParams(budget=1, branching=1, depth=1))
    assert [n.token for n in tree.nodes] == [0]


def test_pooled_pruning_keeps_shallow_tie():
    tree = build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2))
    got = sorted((tree.path(i), round(n.cum_logprob, 3)) for i, n in enumerate(tree.nodes))
    assert got == [((0,), -0.693), ((0, 0), -1.386), ((1,), -1.386)]
    assert {tree.path(i) for i in range(len(tree))} == brute_force_tree(Q.probs, 3, 2)


def test_chain_mode_is_greedy_decoding():
    m = NGramModel(4, 1, {(0,): [0.1, 0.2, 0.3, 0.4], (3,): [0.7, 0.1, 0.1, 0.1]})
    tree = build_draft_tree(m, [0], DraftParams(budget=4, branching=1, depth=4))
    assert best_path(tree) == (3, 0, 3, 0)
    assert len(tree.leaves()) == 1


def test_best_path_tie_prefers_deeper_leaf():
    tree = build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2))
    assert best_path(tree) == (0, 0)


def test_best_path_single_chain():
    tree = DraftTree((_node(2, ROOT, -0.1), _node(3, 0, -0.2, parent_cum=-0.1, depth=2)), 1)
    assert best_path(tree) == (2, 3)


def test_best_path_strict_maximum():
    tree = DraftTree((_node(0, ROOT, -0.1), _node(1, ROOT, -5.0)), 1)
    assert best_path(tree) == (0,)


def _node(tok, parent, lp, parent_cum=0.0, depth=1):
    from specedge.draft import DraftNode
    return DraftNode(tok, parent, lp, parent_cum + lp, depth)


def test_serialize_empty_tree():
    data = serialize_tree(empty_tree(5))
    assert data[-2:] == b"\x00\x00"
    assert deserialize_tree(data) == empty_tree(5)


def test_serialize_round_trip_derived_tree():
    tree = build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2))
    back = deserialize_tree(serialize_tree(tree))
    assert back == tree
    assert [n.cum_logprob for n in back.nodes] == [n.cum_logprob for n in tree.nodes]


def test_truncated_payload_rejected():
    data = serialize_tree(build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2)))
    for cut in (1, 5, len(data) - 1):
        with pytest.raises(DecodeError):
            deserialize_tree(data[:cut])


def test_forward_parent_rejected():
    import struct
    bad = struct.pack(">IH", 1, 1) + struct.pack(">IIf", 0, 0, -0.5)
    with pytest.raises(DecodeError, match="parent"):
        deserialize_tree(bad)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        DraftParams(budget=4, branching=2, depth=0)


params = st.builds(DraftParams, st.integers(1, 10), st.integers(1, 3), st.integers(1, 5))


@given(models(4, sparse=True), params, st.lists(st.integers(0, 3), min_size=1, max_size=3))
def test_tree_structure_invariants(model, p, ctx):
    tree = build_draft_tree(model, ctx, p)
    assert len(tree) <= p.budget
    for i, n in enumerate(tree.nodes):
        assert n.parent < i
        parent_cum = 0.0 if n.parent == ROOT else tree.nodes[n.parent].cum_logprob
        parent_depth = 0 if n.parent == ROOT else tree.nodes[n.parent].depth
        assert abs(n.cum_logprob - (parent_cum + n.logprob)) < 1e-9
        assert n.depth == parent_depth + 1 <= p.depth
        assert n.logprob <= 0
    paths = [tree.path(i) for i in range(len(tree))]
    assert len(set(paths)) == len(paths)
    assert all(path[:-1] in set(paths) | {()} for path in paths)
    assert build_draft_tree(model, ctx, p) == tree
    assert deserialize_tree(serialize_tree(tree)) == tree


@given(models(3), st.integers(1, 5), st.lists(st.integers(0, 2), min_size=1, max_size=2))
def test_branching_one_is_repeated_greedy(model, k, ctx):
    tree = build_draft_tree(model, ctx, DraftParams(budget=k, branching=1, depth=k))
    ctx = list(ctx)
    greedy = []
    for _ in range(k):
        tok = int(np.argmax(model.next_dist(ctx + greedy)))
        greedy.append(tok)
    assert best_path(tree) == tuple(greedy)
