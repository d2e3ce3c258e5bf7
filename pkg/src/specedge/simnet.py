"""Deterministic discrete-event simulation of edges, the verify server and the network.

One engine covers every serving mode. Each session alternates between a
drafting phase (on its edge, or on the server for the server-only modes), a
request to the shared server queue, and a reply that commits tokens:

- ``specedge``: edge drafting, interleaved server batches, proactive drafting.
- ``disagg_naive``: edge drafting, lockstep batches, no proactive drafting.
- ``server_only_sd``: server drafts and verifies, no network.
- ``server_only_ar``: server decodes one token per step, no network.
- ``layer_split_ar``: edge runs its layers, server the rest, one RTT per token.

Token values never depend on the mode or on timing: verification draws one
uniform per absolute position from the session's stream.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any

from .draft import DraftParams, build_draft_tree, empty_tree
from .errors import ConfigError
from .lm import ModelOracle, Rng, session_prompt, verify_stream
from .messages import VerifyRequest, VerifyResponse
from .proactive import (
    ALL_LEAVES, ACCELERATED, DEEPER, SINGLE_BEST, InFlight, RoundRecord,
    SessionState, check_alignment, fresh_passes, new_session, post_verify_update,
    proactive_expand, proactive_pass_limit, select_expansion_heads,
)
from .scheduler import (
    BATCH_SLOPE, BatchPlan, DepthPolicy, VerifyQueue, batch_verify, calibrate_draft_depth,
    plan_batch, verify_service_ms,
)

MODES = ("specedge", "disagg_naive", "server_only_sd", "server_only_ar", "layer_split_ar")
EDGE_MODES = ("specedge", "disagg_naive", "layer_split_ar")

DRAFT_DONE = "DraftPassDone"
REQ_ARRIVE = "ReqArrive"
BATCH_DONE = "BatchDone"
RESP_ARRIVE = "RespArrive"
TOKEN_COMMIT = "TokenCommit"


@dataclass(frozen=True)
class LatencyModel:
    rtt_ms: float = 14.07
    rtt_jitter: float = 0.0
    draft_pass_ms: float = 11.0
    edge_batch: int = 1
    edge_contention: float = 0.35
    verify_ms: float = 94.2
    verify_slope: float = BATCH_SLOPE
    server_draft_ms: float = 13.0
    layer_split_edge_ms: float = 42.3
    layer_split_server_ms: float = 42.3
    autoregressive_step_ms: float = 30.0

    def validate(self) -> None:
        for name in ("rtt_ms", "draft_pass_ms", "verify_ms", "server_draft_ms", "layer_split_edge_ms",
                     "layer_split_server_ms", "autoregressive_step_ms", "edge_contention", "verify_slope"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.rtt_jitter <= 0.5:
            raise ConfigError("jitter must lie in [0, 0.5]")
        if self.edge_batch < 1:
            raise ConfigError("edge_batch must be >= 1")

    def draft_pass(self) -> float:
        """One draft pass on an edge GPU shared by ``edge_batch`` requests."""
        return self.draft_pass_ms * (1.0 + self.edge_contention * (self.edge_batch - 1))

    def verify(self, batch: int, padded_len: int = 0) -> float:
        return verify_service_ms(self.verify_ms, batch, padded_len, self.verify_slope)

    def one_way(self, u: float) -> float:
        return 0.5 * self.rtt_ms * (1.0 + self.rtt_jitter * (2.0 * u - 1.0))


@dataclass(frozen=True)
class SimConfig:
    target: ModelOracle
    draft: ModelOracle
    mode: str = "specedge"
    seed: int = 0
    sessions: int = 1
    prompt_len: int = 4
    max_new_tokens: int = 256
    eos_token: int | None = None
    budget: int = 32
    branching: int = 2
    depth_policy: str = "auto"
    depth: int = 7
    proactive: bool = True
    proactive_policy: str = SINGLE_BEST
    proactive_reuse: str = DEEPER
    proactive_budget: int | None = None
    verify_capacity: int = 1
    latency: LatencyModel = field(default_factory=LatencyModel)
    time_limit_ms: float = math.inf

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.target.vocab_size != self.draft.vocab_size:
            raise ConfigError("target and draft vocabularies differ")
        for name in ("sessions", "prompt_len", "max_new_tokens", "budget", "branching", "depth",
                     "verify_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.branching > self.target.vocab_size:
            raise ConfigError("branching exceeds the vocabulary size")
        if self.depth_policy not in ("auto", "fixed"):
            raise ConfigError(f"unknown depth policy {self.depth_policy!r}")
        if self.proactive_policy not in (SINGLE_BEST, ALL_LEAVES):
            raise ConfigError(f"unknown proactive policy {self.proactive_policy!r}")
        if self.proactive_reuse not in (DEEPER, ACCELERATED):
            raise ConfigError(f"unknown proactive reuse {self.proactive_reuse!r}")
        if self.eos_token is not None and not 0 <= self.eos_token < self.target.vocab_size:
            raise ConfigError("eos_token outside the vocabulary")
        self.latency.validate()

    @property
    def proactive_on(self) -> bool:
        return self.mode == "specedge" and self.proactive

    @property
    def lockstep(self) -> bool:
        return self.mode in ("disagg_naive", "server_only_sd", "server_only_ar")


@dataclass(slots=True)
class EventRow:
    time_ms: float
    seq: int
    kind: str
    session: int
    detail: str = ""


@dataclass(slots=True)
class SchedRow:
    time_ms: float
    event: str
    sessions: tuple[int, ...]
    batch_size: int
    padded_len: int


@dataclass(slots=True)
class CommitRow:
    session: int
    index: int
    token: int
    time_ms: float


@dataclass
class SimResult:
    config: SimConfig
    events: list[EventRow]
    scheduler: list[SchedRow]
    rounds: list[RoundRecord]
    commits: list[CommitRow]
    outputs: dict[int, tuple[int, ...]]
    states: dict[int, SessionState]
    end_ms: float

    @property
    def depths(self) -> list[int]:
        return [r.depth for r in self.rounds]


@dataclass
class _Edge:
    state: SessionState
    policy: DepthPolicy
    net: Rng
    phase: str = "draft"
    depth: int = 1
    fresh: int = 0
    passes_left: int = 0
    pass_busy: bool = False
    heads: tuple[int, ...] = ()
    pro_limit: int = 0
    pro_done: int = 0
    pending: VerifyResponse | None = None
    submit_ms: float = 0.0
    up_ms: float = 0.0
    tree_size: int = 0
    done: bool = False


class Simulation:
    def __init__(self, cfg: SimConfig) -> None:
        cfg.validate()
        self.cfg = cfg
        self.lat = cfg.latency
        self.now = 0.0
        self._seq = 0
        self._heap: list[tuple[float, int, str, int, Any]] = []
        self.events: list[EventRow] = []
        self.sched: list[SchedRow] = []
        self.rounds: list[RoundRecord] = []
        self.commits: list[CommitRow] = []
        self.queue = VerifyQueue()
        self.busy = False
        self.server_ctx: dict[int, list[int]] = {}
        self._last_down: dict[int, float] = {}
        self.vrng = {s: verify_stream(cfg.seed, s) for s in range(cfg.sessions)}
        self.edges: dict[int, _Edge] = {}
        vocab = cfg.target.vocab_size
        for s in range(cfg.sessions):
            prompt = session_prompt(cfg.seed, s, cfg.prompt_len, vocab)
            self.server_ctx[s] = list(prompt)
            self.edges[s] = _Edge(new_session(s, prompt), self._policy(), Rng(cfg.seed).split(s, "net"))

    # -- configuration helpers

    def _policy(self) -> DepthPolicy:
        cfg, lat = self.cfg, self.lat
        if cfg.depth_policy == "fixed":
            return DepthPolicy("fixed", cfg.depth)
        if cfg.mode == "server_only_sd":
            return DepthPolicy("auto", verify_ms=lat.verify(1), draft_pass_ms=lat.server_draft_ms, rtt_ms=0.0)
        return DepthPolicy("auto", verify_ms=lat.verify(1), draft_pass_ms=lat.draft_pass(), rtt_ms=lat.rtt_ms)

    @property
    def _networked(self) -> bool:
        return self.cfg.mode in EDGE_MODES

    def _params(self, depth: int) -> DraftParams:
        return DraftParams(self.cfg.budget, self.cfg.branching, depth)

    # -- event plumbing

    def _push(self, t: float, kind: str, session: int, payload: Any = None) -> None:
        if t < self.now:
            raise RuntimeError(f"event {kind} scheduled in the past ({t} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, session, payload))

    def _delay(self, edge: _Edge, round_: int, direction: int) -> float:
        if not self._networked:
            return 0.0
        return self.lat.one_way(edge.net.at(2 * round_ + direction))

    def run(self) -> SimResult:
        for s in sorted(self.edges):
            self._start_round(s)
        while self._heap:
            t, seq, kind, session, payload = heapq.heappop(self._heap)
            if t > self.cfg.time_limit_ms:
                break
            self.now = t
            detail = self._dispatch(kind, session, payload)
            self.events.append(EventRow(t, seq, kind, session, detail or ""))
        outputs = {s: e.state.generated[:self.cfg.max_new_tokens] for s, e in self.edges.items()}
        outputs = {s: _cut_eos(o, self.cfg.eos_token) for s, o in outputs.items()}
        return SimResult(self.cfg, self.events, self.sched, self.rounds, self.commits, outputs,
                         {s: e.state for s, e in self.edges.items()}, self.now)

    def _dispatch(self, kind: str, session: int, payload: Any) -> str:
        if kind == DRAFT_DONE:
            return self._on_pass(session)
        if kind == REQ_ARRIVE:
            return self._on_request(payload)
        if kind == BATCH_DONE:
            return self._on_batch_done(payload)
        if kind == RESP_ARRIVE:
            return self._on_response(session, payload)
        if kind == TOKEN_COMMIT:
            return payload
        raise ValueError(kind)

    # -- edge side

    def _drafting_ms(self) -> float:
        if self.cfg.mode == "layer_split_ar":
            return self.lat.layer_split_edge_ms
        return self.lat.draft_pass()

    def _start_round(self, s: int) -> None:
        edge = self.edges[s]
        cfg = self.cfg
        if cfg.mode in ("server_only_ar", "layer_split_ar"):
            edge.depth, edge.fresh = 0, 0
        else:
            edge.depth = edge.policy.depth()
            edge.fresh = fresh_passes(edge.state, edge.depth, cfg.proactive_reuse)
        edge.phase = "draft"
        if cfg.mode == "layer_split_ar":
            edge.passes_left = 1
            self._push(self.now + self._drafting_ms(), DRAFT_DONE, s)
        elif cfg.mode in EDGE_MODES and edge.fresh > 0:
            edge.passes_left = edge.fresh
            self._push(self.now + self._drafting_ms(), DRAFT_DONE, s)
        else:
            self._submit(s)

    def _on_pass(self, s: int) -> str:
        edge = self.edges[s]
        if edge.phase == "draft":
            edge.passes_left -= 1
            if edge.passes_left > 0:
                self._push(self.now + self._drafting_ms(), DRAFT_DONE, s)
                return "draft"
            self._submit(s)
            return "draft-last"
        edge.pass_busy = False
        edge.pro_done += 1
        if edge.pending is not None:
            self._handle_response(s)
        elif edge.pro_done < edge.pro_limit:
            edge.pass_busy = True
            self._push(self.now + self._drafting_ms(), DRAFT_DONE, s)
        return f"proactive {edge.pro_done}"

    def _submit(self, s: int) -> None:
        edge = self.edges[s]
        cfg = self.cfg
        state = edge.state
        if edge.depth == 0:
            tree = empty_tree(state.context_len)
        else:
            tree = build_draft_tree(cfg.draft, state.committed, self._params(edge.depth),
                                    seed=state.seed, passes=edge.fresh)
        seq = state.round + 1
        edge.state = state.evolve(inflight=InFlight(seq, tree))
        edge.tree_size = len(tree)
        edge.submit_ms = self.now
        edge.up_ms = self._delay(edge, state.round, 0)
        edge.phase = "wait"
        edge.pro_done = 0
        edge.pro_limit = 0
        edge.heads = ()
        edge.pending = None
        self._push(self.now + edge.up_ms, REQ_ARRIVE, s, VerifyRequest(s, seq, tree, self.now + edge.up_ms))
        if cfg.proactive_on and tree.nodes:
            edge.heads = tuple(select_expansion_heads(tree, cfg.proactive_policy))
            pol = edge.policy
            edge.pro_limit = proactive_pass_limit(pol.rtt_ms, pol.verify_ms, pol.draft_pass_ms, edge.depth)
            if edge.pro_limit > 0:
                edge.pass_busy = True
                self._push(self.now + self._drafting_ms(), DRAFT_DONE, s)

    def _on_response(self, s: int, resp: VerifyResponse) -> str:
        edge = self.edges[s]
        edge.pending = resp
        if edge.pass_busy:
            return "queued behind draft pass"
        self._handle_response(s)
        return f"seq {resp.seq}"

    def _handle_response(self, s: int) -> None:
        edge = self.edges[s]
        cfg = self.cfg
        resp = edge.pending
        edge.pending = None
        edge.pass_busy = False
        state = edge.state
        pro = None
        if edge.heads:
            pro = proactive_expand(cfg.draft, state, edge.heads, edge.pro_done, cfg.branching,
                                   cfg.proactive_budget or cfg.budget)
        align = check_alignment(state.committed, resp.outcome, pro)
        edge.state = post_verify_update(state.evolve(proactive=pro), resp, align)
        pass_ms = self.lat.server_draft_ms if cfg.mode == "server_only_sd" else self._drafting_ms()
        edge.policy.observe(verify_ms=resp.service_ms, draft_pass_ms=pass_ms,
                            rtt_ms=edge.up_ms + self._last_down.pop(s, 0.0))
        self.rounds.append(RoundRecord(
            s, state.round, edge.submit_ms, self.now, edge.depth, edge.fresh, edge.tree_size,
            len(resp.outcome.accepted), resp.outcome.bonus, align.path_aligned,
            align.status.value == "CompleteAlignment", align.preserved_tokens,
            pro.t_draft if pro else 0, len(edge.heads)))
        start = state.context_len - state.prompt_len
        gen = edge.state.generated
        for i in range(start, min(len(gen), cfg.max_new_tokens)):
            self.commits.append(CommitRow(s, i, gen[i], self.now))
            self._push(self.now, TOKEN_COMMIT, s, f"token {i}={gen[i]}")
        if len(gen) >= cfg.max_new_tokens or (cfg.eos_token is not None and cfg.eos_token in gen):
            edge.done = True
            edge.phase = "done"
            self._try_start()
        else:
            self._start_round(s)

    # -- server side

    def _on_request(self, req: VerifyRequest) -> str:
        self.queue.admit(req)
        self.sched.append(SchedRow(self.now, "admit", (req.session,), 0, req.padded_len))
        self._try_start()
        return f"seq {req.seq} nodes {len(req.tree)}"

    def _active(self) -> int:
        return sum(1 for e in self.edges.values() if not e.done)

    def _service_ms(self, plan: BatchPlan) -> tuple[float, float]:
        """Total busy time of a batch and the verification share of it."""
        b = len(plan.members)
        lat = self.lat
        mode = self.cfg.mode
        scale = 1.0 + lat.verify_slope * (b - 1)
        if mode == "layer_split_ar":
            return lat.layer_split_server_ms * scale, lat.layer_split_server_ms * scale
        if mode == "server_only_ar":
            return lat.autoregressive_step_ms * scale, lat.autoregressive_step_ms * scale
        verify = lat.verify(b, plan.padded_len)
        if mode == "server_only_sd":
            depth = max(self.edges[m.session].depth for m in plan.members)
            return verify + depth * lat.server_draft_ms * scale, verify
        return verify, verify

    def _try_start(self) -> None:
        if self.busy or not len(self.queue):
            return
        if self.cfg.lockstep and len(self.queue) < min(self.cfg.verify_capacity, self._active()):
            return
        plan = plan_batch(self.queue, self.cfg.verify_capacity)
        service, verify = self._service_ms(plan)
        self.busy = True
        self.sched.append(SchedRow(self.now, "start_batch", tuple(plan.sessions), len(plan.members),
                                   plan.padded_len))
        self._push(self.now + service, BATCH_DONE, -1, (plan, service, verify))

    def _on_batch_done(self, payload: tuple[BatchPlan, float, float]) -> str:
        plan, service, verify = payload
        responses = batch_verify(plan, self.cfg.target, self.server_ctx, self.vrng, verify)
        self.busy = False
        self.sched.append(SchedRow(self.now, "end_batch", tuple(plan.sessions), len(plan.members),
                                   plan.padded_len))
        for resp in responses:
            if resp.outcome is not None:
                self.server_ctx[resp.session].extend(resp.outcome.tokens)
            self.queue.release(resp.session)
            edge = self.edges[resp.session]
            down = self._delay(edge, edge.state.round, 1)
            self._last_down[resp.session] = down
            self._push(self.now + down, RESP_ARRIVE, resp.session, resp)
        self._try_start()
        return f"batch {plan.sessions} service {service:.3f}"


def _cut_eos(tokens: tuple[int, ...], eos: int | None) -> tuple[int, ...]:
    if eos is None or eos not in tokens:
        return tokens
    return tokens[:tokens.index(eos) + 1]


def run_simulation(cfg: SimConfig) -> SimResult:
    return Simulation(cfg).run()


def baseline_itl(mode: str, latency: LatencyModel, tokens_per_verify: float = 1.0,
                 depth: int | None = None) -> float:
    """Closed-form expected inter-token latency of a single unbatched request."""
    if tokens_per_verify < 1:
        raise ValueError("tokens_per_verify must be >= 1")
    if mode == "layer_split_ar":
        return latency.layer_split_edge_ms + latency.layer_split_server_ms + latency.rtt_ms
    if mode == "server_only_ar":
        return latency.autoregressive_step_ms
    if mode == "server_only_sd":
        d = depth or calibrate_draft_depth(latency.verify_ms, latency.server_draft_ms, 0.0)
        return (d * latency.server_draft_ms + latency.verify_ms) / tokens_per_verify
    if mode in ("disagg_naive", "specedge"):
        d = depth or calibrate_draft_depth(latency.verify_ms, latency.draft_pass(), latency.rtt_ms)
        return (d * latency.draft_pass() + latency.rtt_ms + latency.verify_ms) / tokens_per_verify
    raise ValueError(f"unknown mode {mode!r}")


def work_conserving(result: SimResult, eps: float = 1e-9) -> bool:
    """True when no request ever waited while the server sat idle.

    Rebuilt from the scheduler trace alone: every admitted request's wait
    interval must be covered by the server's busy intervals.
    """
    busy = []
    open_at = None
    waits = []
    admitted: dict[int, float] = {}
    for row in result.scheduler:
        if row.event == "admit":
            admitted[row.sessions[0]] = row.time_ms
        elif row.event == "start_batch":
            if open_at is not None:
                return False
            open_at = row.time_ms
            for s in row.sessions:
                waits.append((admitted.pop(s), row.time_ms))
        elif row.event == "end_batch":
            busy.append((open_at, row.time_ms))
            open_at = None
    if admitted:
        waits.extend((t, result.end_ms) for t in admitted.values())
    if open_at is not None:
        busy.append((open_at, math.inf))
    for a, b in waits:
        if b - a <= eps:
            continue
        t = a
        for lo, hi in busy:
            if lo <= t + eps and hi > t:
                t = hi
            if t >= b - eps:
                break
        if t < b - eps:
            return False
    return True
