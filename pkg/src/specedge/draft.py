"""Draft-tree construction with cumulative-log-probability budget pruning."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DecodeError
from .lm import ModelOracle

ROOT = -1
_WIRE_ROOT = 0xFFFFFFFF
_NODE = struct.Struct(">IIf")
_HEAD = struct.Struct(">IH")


class DraftNode(NamedTuple):
    token: int
    parent: int
    logprob: float
    cum_logprob: float
    depth: int


@dataclass(frozen=True)
class DraftParams:
    budget: int = 32
    branching: int = 2
    depth: int = 7

    def __post_init__(self) -> None:
        if self.budget < 1 or self.branching < 1 or self.depth < 1:
            raise ValueError(f"draft params must be positive: {self}")


@dataclass(frozen=True)
class DraftTree:
    """Nodes in insertion order; a node's parent always precedes it.

    The root (the committed context) is implicit. ``frontier`` lists the
    nodes produced by the most recent draft pass, i.e. where growth resumes.
    """

    nodes: tuple[DraftNode, ...]
    base_context_len: int
    budget: int = field(default=0, compare=False)
    max_depth: int = field(default=0, compare=False)
    frontier: tuple[int, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.nodes)

    def children(self, index: int) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.parent == index]

    def path(self, index: int) -> tuple[int, ...]:
        toks = []
        while index != ROOT:
            node = self.nodes[index]
            toks.append(node.token)
            index = node.parent
        return tuple(reversed(toks))

    def leaves(self) -> list[int]:
        has_child = {n.parent for n in self.nodes}
        return [i for i in range(len(self.nodes)) if i not in has_child]

    def subtree_size(self, index: int) -> int:
        """Node count of the subtree rooted at ``index``, inclusive."""
        inside = {index}
        for i in range(index + 1, len(self.nodes)):
            if self.nodes[i].parent in inside:
                inside.add(i)
        return len(inside)

    def find_path(self, tokens: Sequence[int]) -> int | None:
        """Index of the node reached by ``tokens`` from the root; ROOT for an empty path."""
        index = ROOT
        for tok in tokens:
            for child in self.children(index):
                if self.nodes[child].token == tok:
                    index = child
                    break
            else:
                return None
        return index


def empty_tree(base_context_len: int, budget: int = 0) -> DraftTree:
    return DraftTree((), base_context_len, budget, 0, (ROOT,))


def _rank_key(node: DraftNode, path: tuple[int, ...]):
    # shallower first on ties: keeps cheaper nodes and guarantees parents outrank children
    return (-round(node.cum_logprob, 12), node.depth, node.token, path)


# proposals for shared read-only distributions (n-gram rows); keyed by array identity,
# the array itself is held so its id stays valid
_PROPOSALS: dict[int, tuple[np.ndarray, int, list[tuple[int, float]]]] = {}


def _ranked(q: np.ndarray, branching: int) -> list[tuple[int, float]]:
    out = []
    for tok in np.argsort(-q, kind="stable")[:branching]:
        p = float(q[tok])
        if p <= 0.0:
            break
        out.append((int(tok), float(np.float32(math.log(p)))))
    return out


def _propose(draft: ModelOracle, context: Sequence[int], branching: int) -> list[tuple[int, float]]:
    q = draft.next_dist(context)
    if q.flags.writeable:
        return _ranked(q, branching)
    hit = _PROPOSALS.get(id(q))
    if hit is None or hit[0] is not q or hit[1] != branching:
        if len(_PROPOSALS) > 65536:
            _PROPOSALS.clear()
        hit = _PROPOSALS[id(q)] = (q, branching, _ranked(q, branching))
    return hit[2]


def expand(draft: ModelOracle, context: Sequence[int], tree: DraftTree, passes: int,
           branching: int, budget: int, frozen: int = 0,
           frontier: Iterable[int] | None = None) -> DraftTree:
    """Run ``passes`` draft passes from the frontier of ``tree``.

    Each pass proposes the top-``branching`` tokens under every frontier node,
    pools them with the nodes from index ``frozen`` on, and keeps the best
    ``budget`` of that pool by cumulative log-probability. Nodes before
    ``frozen`` are never pruned and do not count against ``budget``.
    """
    context = list(context)
    nodes = list(tree.nodes)
    paths: list[tuple[int, ...]] = []
    for n in nodes:
        paths.append((paths[n.parent] if n.parent != ROOT else ()) + (n.token,))
    keys: list = [None] * len(nodes)
    front = list(tree.frontier if frontier is None else frontier)
    max_depth = tree.max_depth
    for _ in range(passes):
        if not front:
            break
        first_fresh = len(nodes)
        for parent in front:
            if parent == ROOT:
                ppath, pcum, pdepth = (), 0.0, 0
            else:
                ppath, pcum, pdepth = paths[parent], nodes[parent].cum_logprob, nodes[parent].depth
            for tok, lp in _propose(draft, context + list(ppath), branching):
                node = DraftNode(tok, parent, lp, pcum + lp, pdepth + 1)
                path = ppath + (tok,)
                nodes.append(node)
                paths.append(path)
                keys.append(None)
        if len(nodes) - frozen > budget:
            for i in range(frozen, len(nodes)):
                if keys[i] is None:
                    keys[i] = _rank_key(nodes[i], paths[i])
            ranked = sorted(range(frozen, len(nodes)), key=keys.__getitem__)
            keep = sorted(set(range(frozen)) | set(ranked[:budget]))
            remap = {ROOT: ROOT}
            pool, pool_paths, pool_keys = nodes, paths, keys
            nodes, paths, keys = [], [], []
            for i in keep:
                node = pool[i]
                remap[i] = len(nodes)
                if remap[node.parent] != node.parent:
                    node = node._replace(parent=remap[node.parent])
                nodes.append(node)
                paths.append(pool_paths[i])
                keys.append(pool_keys[i])
            front = [remap[i] for i in keep if i >= first_fresh]
        else:
            front = list(range(first_fresh, len(nodes)))
        if front:
            max_depth = max(max_depth, max(nodes[i].depth for i in front))
    return DraftTree(tuple(nodes), tree.base_context_len, tree.budget or budget,
                     max_depth, tuple(front))


def build_draft_tree(draft: ModelOracle, context: Sequence[int], params: DraftParams,
                     seed: DraftTree | None = None, passes: int | None = None) -> DraftTree:
    """Draft a tree of at most ``params.budget`` nodes after ``context``.

    With ``seed`` given, growth continues from the seed's frontier instead of
    the root; the seed's nodes count against the budget.
    """
    if not context:
        raise ValueError("context must be nonempty")
    start = seed if seed is not None else empty_tree(len(context), params.budget)
    if start.base_context_len != len(context):
        raise ValueError("seed tree does not match the context length")
    start = DraftTree(start.nodes, start.base_context_len, params.budget, start.max_depth, start.frontier)
    n = params.depth if passes is None else passes
    return expand(draft, context, start, n, params.branching, params.budget)


def best_path(tree: DraftTree) -> tuple[int, ...]:
    leaf = best_leaf(tree)
    return tree.path(leaf)


def best_leaf(tree: DraftTree) -> int:
    """Leaf with maximal cumulative log-probability; ties prefer depth, then smaller tokens."""
    if not tree.nodes:
        raise ValueError("no draft")
    paths: list[tuple[int, ...]] = []
    for n in tree.nodes:
        paths.append((paths[n.parent] if n.parent != ROOT else ()) + (n.token,))
    return min(tree.leaves(),
               key=lambda i: (-round(tree.nodes[i].cum_logprob, 12), -tree.nodes[i].depth, paths[i]))


def reroot(tree: DraftTree, index: int, base_context_len: int) -> DraftTree:
    """The strict descendants of ``index`` as a tree whose root is that node."""
    base = tree.nodes[index]
    remap = {index: ROOT}
    nodes = []
    for i in range(index + 1, len(tree.nodes)):
        node = tree.nodes[i]
        if node.parent in remap:
            parent = remap[node.parent]
            pcum = 0.0 if parent == ROOT else nodes[parent].cum_logprob
            remap[i] = len(nodes)
            nodes.append(DraftNode(node.token, parent, node.logprob, pcum + node.logprob,
                                   node.depth - base.depth))
    front = tuple(remap[i] for i in tree.frontier if i in remap and i != index)
    if not nodes:
        front = (ROOT,)
    max_depth = max((n.depth for n in nodes), default=0)
    return DraftTree(tuple(nodes), base_context_len, tree.budget, max_depth, front)


# -- wire payload ---------------------------------------------------------

def serialize_tree(tree: DraftTree) -> bytes:
    if len(tree.nodes) > 0xFFFF:
        raise ValueError("tree too large for a 2-byte node count")
    out = [_HEAD.pack(tree.base_context_len, len(tree.nodes))]
    for node in tree.nodes:
        parent = _WIRE_ROOT if node.parent == ROOT else node.parent
        out.append(_NODE.pack(parent, node.token, node.logprob))
    return b"".join(out)


def deserialize_tree(data: bytes) -> DraftTree:
    if len(data) < _HEAD.size:
        raise DecodeError("node count", f"need {_HEAD.size} header bytes, got {len(data)}")
    base_len, count = _HEAD.unpack_from(data, 0)
    expected = _HEAD.size + count * _NODE.size
    if len(data) != expected:
        raise DecodeError("node records", f"{count} nodes need {expected} bytes, got {len(data)}")
    nodes: list[DraftNode] = []
    for i in range(count):
        parent, token, lp = _NODE.unpack_from(data, _HEAD.size + i * _NODE.size)
        if parent == _WIRE_ROOT:
            parent, pcum, pdepth = ROOT, 0.0, 0
        elif parent < i:
            pcum, pdepth = nodes[parent].cum_logprob, nodes[parent].depth
        else:
            raise DecodeError(f"node {i} parent", f"parent index {parent} does not precede the node")
        if not lp <= 0.0:
            raise DecodeError(f"node {i} logprob", f"logprob {lp} is not <= 0")
        nodes.append(DraftNode(token, parent, lp, pcum + lp, pdepth + 1))
    max_depth = max((n.depth for n in nodes), default=0)
    return DraftTree(tuple(nodes), base_len, count, max_depth)
