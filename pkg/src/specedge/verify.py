"""Lossless verification of a draft tree against the target model.

At every position along the walk the target distribution ``p`` is sampled
once, by inverse CDF with the uniform that the session stream assigns to that
absolute position. If the sampled token is a child of the current node the
walk descends, otherwise it becomes the bonus token and the round ends.

In law this is the sequential multi-candidate rule for rank-drafted
children: child ``c`` is accepted with probability ``r(c)`` under the current
residual ``r`` (initially ``p``), a rejection zeroes ``c`` and renormalizes,
and the bonus is drawn from whatever residual is left. ``enumerate_emission``
sums that sequential rule exactly and is used as the independent oracle.
Because the uniform depends only on the position, the emitted tokens are the
target's own autoregressive sample, whatever tree was drafted.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .draft import ROOT, DraftParams, DraftTree, build_draft_tree
from .errors import ProtocolError
from .lm import ModelOracle, Rng, sample_at

ENUM_LIMIT = 10 ** 6


@dataclass(frozen=True)
class VerifyOutcome:
    accepted: tuple[int, ...]
    bonus: int
    rounds_used: int = 1

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.accepted + (self.bonus,)


def child_order(tree: DraftTree) -> dict[int, list[int]]:
    """Children per node, by descending draft logprob then token id."""
    kids: dict[int, list[int]] = defaultdict(list)
    for i, node in enumerate(tree.nodes):
        kids[node.parent].append(i)
    for lst in kids.values():
        lst.sort(key=lambda i: (-tree.nodes[i].logprob, tree.nodes[i].token))
    return kids


def verify_tree(target: ModelOracle, context: Sequence[int], tree: DraftTree, rng: Rng) -> VerifyOutcome:
    if tree.base_context_len != len(context):
        raise ProtocolError(
            f"tree drafted at context length {tree.base_context_len}, server has {len(context)}")
    kids = child_order(tree)
    ctx = list(context)
    node = ROOT
    accepted: list[int] = []
    while True:
        y = sample_at(target.next_dist(ctx), rng.at(len(ctx)))
        for child in kids.get(node, ()):
            if tree.nodes[child].token == y:
                node = child
                accepted.append(y)
                ctx.append(y)
                break
        else:
            return VerifyOutcome(tuple(accepted), y)


# -- exact enumeration oracle -------------------------------------------

def round_outcome_dist(target: ModelOracle, context: Sequence[int],
                       tree: DraftTree) -> dict[tuple[int, ...], float]:
    """Exact probability of every (accepted + bonus) token tuple for one round."""
    kids = child_order(tree)
    out: dict[tuple[int, ...], float] = defaultdict(float)

    def walk(node: int, ctx: list[int], prefix: tuple[int, ...], reach: float) -> None:
        residual = np.array(target.next_dist(ctx), dtype=np.float64)
        for child in kids.get(node, ()):
            tok = tree.nodes[child].token
            total = residual.sum()
            if total <= 0:
                break
            r = residual / total
            accept = r[tok]
            if accept > 0:
                walk(child, ctx + [tok], prefix + (tok,), reach * accept)
            reach *= 1.0 - accept
            residual = r.copy()
            residual[tok] = 0.0
        total = residual.sum()
        if reach <= 0 or total <= 0:
            return
        for tok, pr in enumerate(residual / total):
            if pr > 0:
                out[prefix + (tok,)] += reach * pr

    walk(ROOT, list(context), (), 1.0)
    return dict(out)


def enumerate_emission_dist(target: ModelOracle, draft: ModelOracle, context: Sequence[int],
                            params: DraftParams, horizon: int) -> dict[tuple[int, ...], float]:
    """Exact law of the first ``horizon`` tokens emitted by repeated draft/verify rounds."""
    if target.vocab_size ** horizon > ENUM_LIMIT:
        raise ValueError(f"V^horizon = {target.vocab_size ** horizon} exceeds {ENUM_LIMIT}")
    dist: dict[tuple[int, ...], float] = defaultdict(float)

    def rounds(ctx: list[int], emitted: tuple[int, ...], prob: float) -> None:
        if len(emitted) >= horizon:
            dist[emitted[:horizon]] += prob
            return
        tree = build_draft_tree(draft, ctx, params)
        for toks, pr in round_outcome_dist(target, ctx, tree).items():
            rounds(ctx + list(toks), emitted + toks, prob * pr)

    rounds(list(context), (), 1.0)
    return dict(dist)


def autoregressive_dist(target: ModelOracle, context: Sequence[int],
                        horizon: int) -> dict[tuple[int, ...], float]:
    if target.vocab_size ** horizon > ENUM_LIMIT:
        raise ValueError("horizon too large to enumerate")
    dist = {}
    for seq in itertools.product(range(target.vocab_size), repeat=horizon):
        prob = 1.0
        ctx = list(context)
        for tok in seq:
            prob *= target.next_dist(ctx)[tok]
            if prob == 0:
                break
            ctx.append(tok)
        if prob > 0:
            dist[seq] = prob
    return dist


def tv_distance(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)
