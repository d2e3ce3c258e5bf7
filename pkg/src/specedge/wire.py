"""Binary framing for the edge/server protocol and the asyncio server and edge.

Frame layout, all integers big-endian::

    u32 payload_len | u8 type | u64 session | u32 seq | payload

VERIFY_REQ carries a serialized draft tree, VERIFY_RESP the accepted tokens
(u16 count, u32 each) and the u32 bonus. HELLO opens a session with its
prompt (u16 count, u32 tokens) and token limit (u32). BYE is empty.
"""

from __future__ import annotations

import asyncio
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Sequence

from .draft import DraftParams, DraftTree, build_draft_tree, deserialize_tree, serialize_tree
from .errors import DecodeError, ProtocolError
from .lm import ModelOracle, verify_stream
from .messages import VerifyRequest, VerifyResponse
from .proactive import (
    ACCELERATED, DEEPER, SINGLE_BEST, InFlight, RoundRecord, check_alignment, fresh_passes, new_session,
    post_verify_update, proactive_expand, proactive_pass_limit, select_expansion_heads,
)
from .scheduler import DepthPolicy, VerifyQueue, batch_verify, plan_batch, verify_service_ms
from .verify import VerifyOutcome

log = logging.getLogger(__name__)

HEADER = struct.Struct(">IBQI")
MAX_PAYLOAD = 1 << 24


class MsgType(IntEnum):
    HELLO = 1
    VERIFY_REQ = 2
    VERIFY_RESP = 3
    BYE = 4


@dataclass(frozen=True)
class WireMessage:
    type: MsgType
    session: int
    seq: int
    payload: bytes = b""


def encode(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ValueError("payload too large")
    return HEADER.pack(len(msg.payload), int(msg.type), msg.session, msg.seq) + msg.payload


def _parse_header(header: bytes) -> tuple[int, MsgType, int, int]:
    length, mtype, session, seq = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise DecodeError("payload length", f"{length} exceeds the {MAX_PAYLOAD}-byte limit")
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise DecodeError("type", f"unknown message type {mtype}") from None
    return length, kind, session, seq


def decode(frame: bytes) -> WireMessage:
    """Decode exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise DecodeError("payload length", f"frame of {len(frame)} bytes is shorter than the header")
    length, kind, session, seq = _parse_header(frame[:HEADER.size])
    if len(frame) != HEADER.size + length:
        raise DecodeError("payload length",
                          f"header declares {length} payload bytes, frame carries {len(frame) - HEADER.size}")
    return WireMessage(kind, session, seq, bytes(frame[HEADER.size:]))


class SeqTracker:
    """Enforces strictly increasing seq per (session, type direction)."""

    def __init__(self) -> None:
        self._last: dict[tuple[int, MsgType], int] = {}

    def check(self, msg: WireMessage) -> None:
        key = (msg.session, MsgType.VERIFY_RESP if msg.type is MsgType.VERIFY_RESP else MsgType.HELLO)
        last = self._last.get(key)
        if last is not None and msg.seq <= last:
            raise DecodeError("seq", f"seq {msg.seq} does not advance past {last} for session {msg.session}")
        self._last[key] = msg.seq


async def read_message(reader: asyncio.StreamReader) -> WireMessage | None:
    """Next frame from the stream, or None on a clean EOF between frames."""
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise DecodeError("payload length", "stream ended inside a frame header") from None
    length, kind, session, seq = _parse_header(header)
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise DecodeError("payload length", f"stream ended before {length} payload bytes") from None
    return WireMessage(kind, session, seq, payload)


# -- typed payloads

def hello_payload(prompt: Sequence[int], max_new_tokens: int) -> bytes:
    return struct.pack(f">H{len(prompt)}II", len(prompt), *prompt, max_new_tokens)


def parse_hello(payload: bytes) -> tuple[tuple[int, ...], int]:
    if len(payload) < 2:
        raise DecodeError("prompt length", "missing")
    (n,) = struct.unpack_from(">H", payload)
    if len(payload) != 2 + 4 * n + 4:
        raise DecodeError("prompt tokens", f"{n} tokens need {6 + 4 * n} bytes, got {len(payload)}")
    vals = struct.unpack_from(f">{n}II", payload, 2)
    return tuple(vals[:n]), vals[n]


def verify_req(session: int, seq: int, tree: DraftTree) -> WireMessage:
    return WireMessage(MsgType.VERIFY_REQ, session, seq, serialize_tree(tree))


def verify_resp(session: int, seq: int, outcome: VerifyOutcome) -> WireMessage:
    acc = outcome.accepted
    payload = struct.pack(f">H{len(acc)}II", len(acc), *acc, outcome.bonus)
    return WireMessage(MsgType.VERIFY_RESP, session, seq, payload)


def parse_resp(payload: bytes) -> VerifyOutcome:
    if len(payload) < 2:
        raise DecodeError("accepted_len", "missing")
    (n,) = struct.unpack_from(">H", payload)
    if len(payload) != 2 + 4 * n + 4:
        raise DecodeError("accepted tokens", f"{n} tokens need {6 + 4 * n} bytes, got {len(payload)}")
    vals = struct.unpack_from(f">{n}II", payload, 2)
    return VerifyOutcome(tuple(vals[:n]), vals[n])


# -- server

@dataclass
class ServerConfig:
    seed: int = 0
    verify_capacity: int = 1
    verify_ms: float = 0.0  # real time to sleep per batch; 0 runs as fast as possible
    verify_slope: float = 0.15


@dataclass
class _Conn:
    writer: asyncio.StreamWriter
    context: list[int]
    seqs: SeqTracker = field(default_factory=SeqTracker)


class VerifyServer:
    """Accepts one connection per session and verifies through a single batching loop."""

    def __init__(self, target: ModelOracle, config: ServerConfig | None = None) -> None:
        self.target = target
        self.config = config or ServerConfig()
        self.queue = VerifyQueue()
        self._wake = asyncio.Event()
        self.conns: dict[int, _Conn] = {}
        self.trace: list[tuple[float, str, tuple[int, ...], int, int]] = []
        self._server: asyncio.AbstractServer | None = None
        self._loop_task: asyncio.Task | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        self._loop_task = asyncio.create_task(self._schedule_loop())
        return self._server.sockets[0].getsockname()[:2]

    async def close(self) -> None:
        if self._loop_task:
            self._loop_task.cancel()
        if self._server:
            self._server.close()
            await self._server.wait_closed()
        for conn in list(self.conns.values()):
            conn.writer.close()

    async def serve_forever(self) -> None:
        async with self._server:
            await self._server.serve_forever()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        session = None
        try:
            hello = await read_message(reader)
            if hello is None:
                return
            if hello.type is not MsgType.HELLO:
                raise ProtocolError(f"expected HELLO, got {hello.type.name}")
            prompt, _ = parse_hello(hello.payload)
            if hello.session in self.conns:
                raise ProtocolError(f"session {hello.session} is already connected")
            session = hello.session
            conn = self.conns[session] = _Conn(writer, list(prompt))
            conn.seqs.check(hello)
            while True:
                msg = await read_message(reader)
                if msg is None or msg.type is MsgType.BYE:
                    break
                if msg.session != session:
                    raise ProtocolError(f"frame for session {msg.session} on session {session}'s connection")
                conn.seqs.check(msg)
                if msg.type is not MsgType.VERIFY_REQ:
                    raise ProtocolError(f"unexpected {msg.type.name} from edge")
                tree = deserialize_tree(msg.payload)
                self.queue.admit(VerifyRequest(session, msg.seq, tree, time.monotonic()))
                self.trace.append((time.monotonic(), "admit", (session,), 0, tree.base_context_len + len(tree)))
                self._wake.set()
        except (DecodeError, ProtocolError, ConnectionError) as exc:
            log.warning("closing session %s: %s", session, exc)
        finally:
            if session is not None:
                self.conns.pop(session, None)
                self.queue.release(session)
            writer.close()

    async def _schedule_loop(self) -> None:
        cfg = self.config
        while True:
            await self._wake.wait()
            self._wake.clear()
            while len(self.queue):
                plan = plan_batch(self.queue, cfg.verify_capacity)
                now = time.monotonic()
                self.trace.append((now, "start_batch", tuple(plan.sessions), len(plan.members), plan.padded_len))
                service = verify_service_ms(cfg.verify_ms, len(plan.members), plan.padded_len, cfg.verify_slope)
                if service > 0:
                    await asyncio.sleep(service / 1000.0)
                live = [m for m in plan.members if m.session in self.conns]
                contexts = {m.session: self.conns[m.session].context for m in live}
                rngs = {m.session: verify_stream(cfg.seed, m.session) for m in live}
                plan = replace(plan, members=tuple(live))
                responses = batch_verify(plan, self.target, contexts, rngs, service) if live else []
                self.trace.append((time.monotonic(), "end_batch", tuple(plan.sessions), len(live), plan.padded_len))
                for resp in responses:
                    self.queue.release(resp.session)
                    conn = self.conns.get(resp.session)
                    if conn is None:
                        continue
                    if resp.outcome is None:
                        log.warning("session %s: %s", resp.session, resp.error)
                        conn.writer.close()
                        continue
                    conn.context.extend(resp.outcome.tokens)
                    conn.writer.write(encode(verify_resp(resp.session, resp.seq, resp.outcome)))
                    try:
                        await conn.writer.drain()
                    except ConnectionError as exc:
                        log.warning("session %s lost: %s", resp.session, exc)


# -- edge

@dataclass
class EdgeConfig:
    session: int
    prompt: tuple[int, ...]
    max_new_tokens: int = 256
    eos_token: int | None = None
    params: DraftParams = field(default_factory=DraftParams)
    depth_policy: DepthPolicy | None = None
    proactive: bool = True
    proactive_policy: str = SINGLE_BEST
    proactive_reuse: str = DEEPER
    proactive_budget: int | None = None
    draft_pass_ms: float = 0.0  # real time to sleep per draft pass


@dataclass
class EdgeResult:
    session: int
    tokens: tuple[int, ...]
    rounds: list[RoundRecord]


async def edge_session(host: str, port: int, draft: ModelOracle, cfg: EdgeConfig) -> EdgeResult:
    """Run one edge: draft, send, draft proactively, receive, update, until done."""
    reader, writer = await asyncio.open_connection(host, port)
    seqs = SeqTracker()
    state = new_session(cfg.session, cfg.prompt)
    policy = cfg.depth_policy or DepthPolicy("fixed", cfg.params.depth)
    rounds: list[RoundRecord] = []
    pass_s = cfg.draft_pass_ms / 1000.0
    t0 = time.monotonic()
    try:
        writer.write(encode(WireMessage(MsgType.HELLO, cfg.session, 0,
                                        hello_payload(cfg.prompt, cfg.max_new_tokens))))
        while True:
            depth = policy.depth()
            fresh = fresh_passes(state, depth, cfg.proactive_reuse)
            if pass_s:
                await asyncio.sleep(pass_s * fresh)
            params = replace(cfg.params, depth=depth)
            tree = build_draft_tree(draft, state.committed, params, seed=state.seed, passes=fresh)
            seq = state.round + 1
            state = state.evolve(inflight=InFlight(seq, tree))
            t_submit = time.monotonic()
            writer.write(encode(verify_req(cfg.session, seq, tree)))
            await writer.drain()

            reply = asyncio.ensure_future(read_message(reader))
            heads: tuple[int, ...] = ()
            done_passes = 0
            if cfg.proactive and tree.nodes:
                heads = tuple(select_expansion_heads(tree, cfg.proactive_policy))
                limit = proactive_pass_limit(policy.rtt_ms, policy.verify_ms, policy.draft_pass_ms, depth)
                while done_passes < limit and not reply.done():
                    # one pass at a time; a reply is only handled between passes
                    await asyncio.sleep(pass_s)
                    done_passes += 1
            msg = await reply
            if msg is None:
                raise ConnectionError("server closed the connection")
            seqs.check(msg)
            if msg.type is not MsgType.VERIFY_RESP:
                raise ProtocolError(f"unexpected {msg.type.name} from server")
            outcome = parse_resp(msg.payload)
            pro = None
            if heads:
                pro = proactive_expand(draft, state, heads, done_passes, cfg.params.branching,
                                       cfg.proactive_budget or cfg.params.budget)
            align = check_alignment(state.committed, outcome, pro)
            prev = state
            state = post_verify_update(state.evolve(proactive=pro), VerifyResponse(
                cfg.session, msg.seq, outcome), align)
            rounds.append(RoundRecord(
                cfg.session, prev.round, (t_submit - t0) * 1000.0, (time.monotonic() - t0) * 1000.0,
                depth, fresh,
                len(tree), len(outcome.accepted), outcome.bonus, align.path_aligned,
                align.status.value == "CompleteAlignment", align.preserved_tokens,
                pro.t_draft if pro else 0, len(heads)))
            gen = state.generated
            if len(gen) >= cfg.max_new_tokens or (cfg.eos_token is not None and cfg.eos_token in gen):
                break
        writer.write(encode(WireMessage(MsgType.BYE, cfg.session, state.round + 1)))
        await writer.drain()
    finally:
        writer.close()
    tokens = state.generated[:cfg.max_new_tokens]
    if cfg.eos_token is not None and cfg.eos_token in tokens:
        tokens = tokens[:tokens.index(cfg.eos_token) + 1]
    return EdgeResult(cfg.session, tokens, rounds)
