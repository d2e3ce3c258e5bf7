"""Server-side pipeline-aware scheduling: queueing, batching, depth calibration."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ProtocolError
from .lm import ModelOracle, Rng
from .messages import VerifyRequest, VerifyResponse
from .verify import verify_tree

EWMA_WEIGHT = 0.2
BATCH_SLOPE = 0.15
PAD = -1


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def calibrate_draft_depth(verify_ms: float, draft_pass_ms: float, rtt_ms: float) -> int:
    """Passes such that drafting + RTT fills the verification time."""
    if verify_ms <= 0 or draft_pass_ms <= 0 or rtt_ms < 0:
        raise ValueError("verify and draft times must be positive and rtt nonnegative")
    return max(1, round_half_away((verify_ms - rtt_ms) / draft_pass_ms))


class DepthPolicy:
    """Draft depth, either fixed or recalibrated from running timing estimates."""

    def __init__(self, mode: str = "auto", fixed: int | None = None, *, verify_ms: float = 94.2,
                 draft_pass_ms: float = 11.0, rtt_ms: float = 14.07, weight: float = EWMA_WEIGHT) -> None:
        if mode not in ("auto", "fixed"):
            raise ValueError(f"unknown depth mode {mode!r}")
        if mode == "fixed" and (fixed is None or fixed < 1):
            raise ValueError("fixed depth policy needs a depth >= 1")
        self.mode = mode
        self.fixed = fixed
        self.weight = weight
        self.verify_ms = verify_ms
        self.draft_pass_ms = draft_pass_ms
        self.rtt_ms = rtt_ms
        self._seen: set[str] = set()

    def _mix(self, name: str, new: float | None) -> None:
        if new is None:
            return
        if name not in self._seen:  # the first measurement replaces the configured prior
            self._seen.add(name)
            setattr(self, name, new)
        else:
            setattr(self, name, (1 - self.weight) * getattr(self, name) + self.weight * new)

    def observe(self, verify_ms: float | None = None, draft_pass_ms: float | None = None,
                rtt_ms: float | None = None) -> None:
        self._mix("verify_ms", verify_ms)
        self._mix("draft_pass_ms", draft_pass_ms)
        self._mix("rtt_ms", rtt_ms)

    def depth(self) -> int:
        if self.mode == "fixed":
            return self.fixed
        return calibrate_draft_depth(self.verify_ms, self.draft_pass_ms, self.rtt_ms)


def verify_service_ms(v0: float, batch: int, padded_len: int = 0, slope: float = BATCH_SLOPE) -> float:
    """Verification time of one batch. Padding is free: the model is flat in length."""
    return v0 * (1.0 + slope * (batch - 1))


class VerifyQueue:
    """FIFO of pending requests; at most one outstanding request per session."""

    def __init__(self) -> None:
        self._q: deque[VerifyRequest] = deque()
        self._outstanding: set[int] = set()

    def __len__(self) -> int:
        return len(self._q)

    def admit(self, req: VerifyRequest) -> None:
        if req.session in self._outstanding:
            raise ProtocolError(f"session {req.session} already has an outstanding request")
        self._outstanding.add(req.session)
        self._q.append(req)

    def poll(self) -> VerifyRequest | None:
        return self._q.popleft() if self._q else None

    def release(self, session: int) -> None:
        """Called once the response for ``session`` has been produced."""
        self._outstanding.discard(session)

    def pending_sessions(self) -> list[int]:
        return [r.session for r in self._q]


@dataclass(frozen=True)
class BatchPlan:
    members: tuple[VerifyRequest, ...]
    padded_len: int

    @property
    def sessions(self) -> list[int]:
        return [m.session for m in self.members]


def plan_batch(queue: VerifyQueue, capacity: int) -> BatchPlan | None:
    """Take up to ``capacity`` oldest requests right away; never waits for more."""
    members = []
    while len(members) < capacity and len(queue):
        members.append(queue.poll())
    if not members:
        return None
    return BatchPlan(tuple(members), max(m.padded_len for m in members))


def pad_batch(contexts: Sequence[Sequence[int]], width: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad contexts into a token matrix with a validity mask."""
    tokens = np.full((len(contexts), width), PAD, dtype=np.int64)
    mask = np.zeros((len(contexts), width), dtype=bool)
    for row, ctx in enumerate(contexts):
        tokens[row, :len(ctx)] = ctx
        mask[row, :len(ctx)] = True
    return tokens, mask


def batch_verify(plan: BatchPlan, target: ModelOracle, contexts: Mapping[int, Sequence[int]],
                 rngs: Mapping[int, Rng], service_ms: float = 0.0) -> list[VerifyResponse]:
    """Verify every member of a batch; each row only ever sees its own unpadded tokens.

    A member whose tree does not match the server's context gets an error
    response; the rest of the batch is unaffected.
    """
    rows = [contexts[m.session] for m in plan.members]
    width = max(plan.padded_len, max(len(r) for r in rows))
    tokens, mask = pad_batch(rows, width)
    out = []
    for row, req in enumerate(plan.members):
        ctx = tokens[row, mask[row]].tolist()
        try:
            outcome = verify_tree(target, ctx, req.tree, rngs[req.session])
        except ProtocolError as exc:
            out.append(VerifyResponse(req.session, req.seq, None, str(exc), service_ms))
        else:
            out.append(VerifyResponse(req.session, req.seq, outcome, None, service_ms))
    return out
