"""Edge-side proactive drafting while a verification is in flight.

After submitting a tree the edge keeps drafting from one or more expansion
heads. When the server's reply arrives, the reply is a complete alignment if
the accepted tokens equal a head's path and the bonus equals a proactive
child of that head; the branch under that child then seeds the next tree.
Anything short of that discards the proactive work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .draft import DraftTree, best_leaf, expand, reroot
from .errors import ProtocolError
from .lm import ModelOracle
from .messages import VerifyResponse
from .verify import VerifyOutcome

SINGLE_BEST = "single_best"
ALL_LEAVES = "all_leaves"
DEEPER = "deeper"
ACCELERATED = "accelerated"


class Alignment(str, Enum):
    COMPLETE = "CompleteAlignment"
    MISS = "Miss"


@dataclass(frozen=True)
class InFlight:
    seq: int
    tree: DraftTree


@dataclass(frozen=True)
class ProactiveTree:
    """The submitted tree extended under ``heads``; nodes from ``first`` on are proactive."""

    tree: DraftTree
    heads: tuple[int, ...]
    first: int
    passes_done: int

    @property
    def anchor_path(self) -> tuple[int, ...]:
        return self.tree.path(self.heads[0]) if self.heads else ()

    @property
    def anchor_paths(self) -> list[tuple[int, ...]]:
        return [self.tree.path(h) for h in self.heads]

    @property
    def t_draft(self) -> int:
        return len(self.tree) - self.first

    def proactive_children(self, head: int) -> list[int]:
        return [i for i in self.tree.children(head) if i >= self.first]


@dataclass(frozen=True)
class SessionState:
    session: int
    committed: tuple[int, ...]
    prompt_len: int
    round: int = 0
    inflight: InFlight | None = None
    proactive: ProactiveTree | None = None
    seed: DraftTree | None = None
    preserved: int = 0

    @property
    def context_len(self) -> int:
        return len(self.committed)

    def evolve(self, **changes) -> "SessionState":
        """Copy with ``changes`` applied; a cheaper ``dataclasses.replace``."""
        return SessionState(**{**self.__dict__, **changes})

    @property
    def generated(self) -> tuple[int, ...]:
        return self.committed[self.prompt_len:]


@dataclass(frozen=True)
class AlignmentResult:
    status: Alignment
    matched_node: int | None = None
    preserved_tokens: int = 0
    path_aligned: bool = False


@dataclass(frozen=True)
class GainEstimate:
    p_align: float
    p_match_given_align: float
    t_draft: float
    h_expan: float
    expected_gain: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "expected_gain",
                           self.p_align * self.p_match_given_align * (self.t_draft / self.h_expan - 1.0))


@dataclass(frozen=True)
class RoundRecord:
    """One verify round of one session, as written to the per-round CSV."""

    session: int
    round: int
    submit_ms: float
    commit_ms: float
    depth: int
    fresh_passes: int
    tree_size: int
    accepted_len: int
    bonus: int
    path_aligned: bool
    aligned: bool
    preserved: int
    t_draft: int
    h_expan: int


def new_session(session: int, prompt: Sequence[int]) -> SessionState:
    if not prompt:
        raise ValueError("prompt must be nonempty")
    return SessionState(session, tuple(prompt), len(prompt))


def select_expansion_heads(tree: DraftTree, policy: str = SINGLE_BEST) -> list[int]:
    if not tree.nodes:
        raise ValueError("no draft")
    if policy == SINGLE_BEST:
        return [best_leaf(tree)]
    if policy == ALL_LEAVES:
        return tree.leaves()
    raise ValueError(f"unknown expansion policy {policy!r}")


def proactive_expand(draft: ModelOracle, state: SessionState, heads: Iterable[int], passes: int,
                     branching: int, budget: int) -> ProactiveTree:
    """Draft up to ``passes`` passes under ``heads`` of the in-flight tree.

    New nodes are pooled across heads and pruned to ``budget``; the submitted
    tree itself is left untouched.
    """
    if state.inflight is None:
        raise ProtocolError(f"session {state.session} has no request in flight")
    tree = state.inflight.tree
    heads = tuple(heads)
    ext = expand(draft, state.committed, tree, passes, branching, budget,
                 frozen=len(tree), frontier=heads)
    return ProactiveTree(ext, heads, len(tree), passes)


def check_alignment(committed_prefix: Sequence[int], outcome: VerifyOutcome,
                    pro: ProactiveTree | None) -> AlignmentResult:
    if pro is None or not pro.heads:
        return AlignmentResult(Alignment.MISS)
    if pro.tree.base_context_len != len(committed_prefix):
        raise ProtocolError("proactive tree does not belong to this committed prefix")
    for head in pro.heads:
        if pro.tree.path(head) != outcome.accepted:
            continue
        for child in pro.proactive_children(head):
            if pro.tree.nodes[child].token == outcome.bonus:
                return AlignmentResult(Alignment.COMPLETE, child, pro.tree.subtree_size(child), True)
        return AlignmentResult(Alignment.MISS, path_aligned=True)
    return AlignmentResult(Alignment.MISS)


def post_verify_update(state: SessionState, response: VerifyResponse,
                       align: AlignmentResult) -> SessionState:
    """Commit accepted + bonus and carry an aligned proactive branch into the next round."""
    if state.inflight is None or response.seq != state.inflight.seq or response.session != state.session:
        raise ProtocolError(f"stale response seq={response.seq} for session {state.session}")
    if response.outcome is None:
        raise ProtocolError(f"server rejected request {response.seq}: {response.error}")
    committed = state.committed + response.outcome.tokens
    seed = None
    preserved = 0
    if align.status is Alignment.COMPLETE:
        seed = reroot(state.proactive.tree, align.matched_node, len(committed))
        preserved = align.preserved_tokens
    return state.evolve(committed=committed, round=state.round + 1, inflight=None,
                        proactive=None, seed=seed, preserved=preserved)


def fresh_passes(state: SessionState, depth: int, reuse: str = DEEPER) -> int:
    """Draft passes to run before the next submission.

    ``deeper`` runs the full depth on top of a preserved branch; ``accelerated``
    counts the passes that produced the preserved branch toward the depth.
    Those passes are the branch height including the matched token itself,
    which equals the preserved token count when the branch is a chain.
    """
    if state.seed is None or reuse == DEEPER:
        return depth
    if reuse != ACCELERATED:
        raise ValueError(f"unknown reuse mode {reuse!r}")
    done = 1 + max((n.depth for n in state.seed.nodes), default=0)
    n = max(0, depth - done)
    if n == 0 and not state.seed.nodes:
        n = 1
    return n


def proactive_pass_limit(rtt_ms: float, verify_ms: float, draft_pass_ms: float, cap: int) -> int:
    """Passes that fit in the wait for a reply, capped at the calibrated depth."""
    if draft_pass_ms <= 0:
        return cap
    return max(0, min(cap, math.ceil((rtt_ms + verify_ms) / draft_pass_ms)))


def expected_gain(p_align: float, p_match_given_align: float, t_draft: float,
                  h_expan: float) -> GainEstimate:
    if h_expan < 1:
        raise ValueError("h_expan must be >= 1")
    if t_draft < 0:
        raise ValueError("t_draft must be >= 0")
    for name, p in (("p_align", p_align), ("p_match_given_align", p_match_given_align)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name}={p} is not a probability")
    return GainEstimate(p_align, p_match_given_align, t_draft, h_expan)


def measure_gain_components(trace: Sequence[RoundRecord], window: int | None = None,
                            session: int | None = None) -> GainEstimate:
    """Empirical gain components over rounds that ran proactive expansion.

    ``window`` keeps only the last N such rounds (a sliding estimate); by
    default the estimate is cumulative. ``session`` restricts to one session.
    """
    rows = [r for r in trace if r.h_expan > 0 and (session is None or r.session == session)]
    if window is not None:
        rows = rows[-window:]
    if not rows:
        raise ValueError("trace has no completed proactive rounds")
    n = len(rows)
    path_aligned = sum(1 for r in rows if r.path_aligned)
    aligned = sum(1 for r in rows if r.aligned)
    p_align = path_aligned / n
    p_match = aligned / path_aligned if path_aligned else 0.0
    t_draft = sum(r.t_draft for r in rows) / n
    h_expan = sum(r.h_expan for r in rows) / n
    return expected_gain(p_align, p_match, t_draft, h_expan)
