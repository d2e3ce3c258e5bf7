"""Experiment configuration, metrics, cost efficiency and CSV reporting."""

from __future__ import annotations

import asyncio
import csv
import io
import itertools
import logging
import os
import statistics
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .draft import DraftParams
from .errors import ConfigError
from .lm import ModelOracle, NGramModel, TableModel, blend, random_ngram, session_prompt
from .proactive import RoundRecord, measure_gain_components
from .scheduler import DepthPolicy
from .simnet import CommitRow, LatencyModel, SchedRow, SimConfig, SimResult, run_simulation

log = logging.getLogger(__name__)

SWEEP_KEYS = ("mode", "rtt_ms", "seed")

DEFAULTS: dict[str, Any] = {
    "mode": "specedge",
    "transport": "sim",
    "seed": 0,
    "vocab_size": 8,
    "target.kind": "random_ngram",
    "target.order": 2,
    "target.seed": 1,
    "target.concentration": 0.25,
    "target.fill": 1.0,
    "target.temperature": 0.55,
    "target.probs": None,
    "target.rows": None,
    "draft.kind": "blend",
    "draft.order": 2,
    "draft.seed": 2,
    "draft.weight": 0.25,
    "draft.concentration": 0.3,
    "draft.fill": 1.0,
    "draft.temperature": 0.55,
    "draft.probs": None,
    "draft.rows": None,
    "tree.budget": 32,
    "tree.branching": 2,
    "depth.policy": "auto",
    "depth.fixed": 7,
    "proactive.enabled": True,
    "proactive.policy": "single_best",
    "proactive.reuse": "deeper",
    "proactive.budget": 0,
    "rtt_ms": 14.07,
    "jitter": 0.0,
    "verify_ms": 94.2,
    "verify_slope": 0.15,
    "draft_pass_ms": 11.0,
    "server_draft_ms": 13.0,
    "layer_split_edge_ms": 42.3,
    "layer_split_server_ms": 42.3,
    "autoregressive_step_ms": 30.0,
    "sessions": 1,
    "verify_capacity": 1,
    "edge_batch": 1,
    "edge_contention": 0.35,
    "max_new_tokens": 256,
    "prompt_len": 4,
    "eos_token": -1,
    "time_limit_ms": 0.0,
    "warmup_rounds": 1,
    "pricing.server_rate": 4.05,
    "pricing.edge_rate": 0.35,
    "pricing.edges_per_request": 2,
    "wire.host": "127.0.0.1",
    "wire.port": 7433,
    "wire.pace": False,
}

SUMMARY_COLUMNS = ["mode", "rtt_ms", "depth", "sessions", "itl_mean_ms", "itl_p50_ms", "throughput_tok_s",
                   "tpv_mean", "tpv_std", "p_align", "busy_frac", "cost_k_tok_per_usd", "seed"]


# -- pricing and metrics

@dataclass(frozen=True)
class PricingConfig:
    server_rate: float = 4.05
    edge_rate: float = 0.35
    edges_per_request: int = 2

    def __post_init__(self) -> None:
        if self.server_rate < 0 or self.edge_rate < 0 or self.edges_per_request < 0:
            raise ValueError("rates must be nonnegative")


def cost_efficiency(throughput: float, pricing: PricingConfig, concurrent_requests: int = 1,
                    server_only: bool = False) -> float:
    """Generated tokens per dollar, in thousands."""
    if throughput < 0 or concurrent_requests < 0:
        raise ValueError("throughput and request count must be nonnegative")
    edges = 0.0 if server_only else pricing.edges_per_request * concurrent_requests * pricing.edge_rate
    rate = pricing.server_rate + edges
    if rate <= 0:
        raise ValueError("total hourly rate is zero")
    return throughput * 3600.0 / rate / 1000.0


@dataclass(frozen=True)
class Metrics:
    itl_mean_ms: float
    itl_p50_ms: float
    itl_p95_ms: float
    server_throughput: float
    tpv_mean: float
    tpv_std: float
    cost_k_tokens_per_dollar: float
    p_align: float
    p_match_given_align: float
    server_busy_fraction: float


@dataclass
class Trace:
    commits: list[CommitRow]
    rounds: list[RoundRecord]
    scheduler: list[SchedRow] = field(default_factory=list)
    start_ms: float = 0.0

    @classmethod
    def from_result(cls, result: SimResult) -> "Trace":
        return cls(result.commits, result.rounds, result.scheduler)


def _gaps(commits: Sequence[CommitRow]) -> list[float]:
    by_session: dict[int, list[CommitRow]] = {}
    for c in commits:
        by_session.setdefault(c.session, []).append(c)
    gaps = []
    for rows in by_session.values():
        rows.sort(key=lambda c: c.index)
        gaps.extend(b.time_ms - a.time_ms for a, b in zip(rows, rows[1:]))
    return gaps


def busy_fraction(scheduler: Sequence[SchedRow]) -> float:
    starts = [r.time_ms for r in scheduler if r.event == "start_batch"]
    ends = [r.time_ms for r in scheduler if r.event == "end_batch"]
    if not ends:
        return 0.0
    busy = sum(e - s for s, e in zip(starts, ends))
    span = ends[-1] - starts[0]
    return busy / span if span > 0 else 1.0


def compute_metrics(trace: Trace, pricing: PricingConfig | None = None, concurrent_requests: int = 1,
                    server_only: bool = False, warmup_rounds: int = 0) -> Metrics:
    """Summary metrics of one run.

    ITL pools the gaps between consecutive commits of each session, so the
    wait for a session's first token is excluded. Throughput skips each
    session's first ``warmup_rounds`` rounds.
    """
    if not trace.commits:
        raise ValueError("trace has no committed tokens")
    gaps = _gaps(trace.commits)
    if gaps:
        itl_mean = float(np.mean(gaps))
        itl_p50, itl_p95 = (float(v) for v in np.percentile(gaps, [50, 95]))
    else:
        itl_mean = itl_p50 = itl_p95 = 0.0

    cutoff: dict[int, float] = {}
    for r in trace.rounds:
        if r.round == warmup_rounds - 1:
            cutoff[r.session] = r.commit_ms
    counted = [c for c in trace.commits if c.time_ms > cutoff.get(c.session, trace.start_ms - 1.0)]
    begin = min(cutoff.values()) if cutoff and warmup_rounds > 0 else trace.start_ms
    end = max(c.time_ms for c in trace.commits)
    throughput = len(counted) * 1000.0 / (end - begin) if end > begin else 0.0

    tpv = [r.accepted_len + 1 for r in trace.rounds]
    tpv_mean = float(np.mean(tpv)) if tpv else 1.0
    tpv_std = float(np.std(tpv)) if tpv else 0.0
    try:
        gain = measure_gain_components(trace.rounds)
        p_align, p_match = gain.p_align, gain.p_match_given_align
    except ValueError:
        p_align = p_match = 0.0
    cost = cost_efficiency(throughput, pricing or PricingConfig(), concurrent_requests, server_only)
    return Metrics(itl_mean, itl_p50, itl_p95, throughput, tpv_mean, tpv_std, cost, p_align, p_match,
                   busy_fraction(trace.scheduler))


# -- configuration

def flatten(table: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and not name.endswith(".rows"):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Read a TOML experiment file into a flat ``dotted.key -> value`` dict.

    Unknown keys are rejected so that typos cannot silently fall back to defaults.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = flatten(tomllib.load(fh))
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(DEFAULTS)
    cfg.update(raw)
    return cfg


def _parse_rows(rows: dict[str, Sequence[float]]) -> dict[tuple[int, ...], Sequence[float]]:
    return {tuple(int(t) for t in str(k).split(",")): v for k, v in rows.items()}


def build_model(cfg: dict[str, Any], role: str, target: ModelOracle | None = None) -> ModelOracle:
    get = lambda k: cfg[f"{role}.{k}"]  # noqa: E731
    kind = get("kind")
    vocab = int(cfg["vocab_size"])
    temp = float(get("temperature"))
    if kind == "same":
        if target is None:
            raise ConfigError("only the draft model can be 'same'")
        return target
    if kind == "table":
        if get("probs") is None:
            raise ConfigError(f"{role}.probs is required for a table model")
        return TableModel(get("probs"), temp)
    if kind == "ngram":
        if get("rows") is None:
            raise ConfigError(f"{role}.rows is required for an ngram model")
        return NGramModel(vocab, int(get("order")), _parse_rows(get("rows")), temp)
    if kind == "random_ngram":
        return random_ngram(vocab, int(get("order")), np.random.default_rng(int(get("seed"))), temp,
                            float(get("concentration")), float(get("fill")))
    if kind == "blend":
        if target is None:
            raise ConfigError("only the draft model can be a blend")
        np_rng = np.random.default_rng(int(get("seed")))
        base = build_model({**cfg, "target.temperature": 1.0}, "target")
        if isinstance(base, TableModel):
            noise = TableModel(np_rng.dirichlet(np.full(vocab, float(get("concentration")))))
            return TableModel(blend(base, noise, float(get("weight"))).probs, temp)
        noise = random_ngram(vocab, base.order, np_rng, 1.0, float(get("concentration")), float(get("fill")))
        mixed = blend(base, noise, float(get("weight")))
        return NGramModel(vocab, mixed.order, mixed.rows, temp)
    raise ConfigError(f"unknown {role}.kind {kind!r}")


def _sweep(cfg: dict[str, Any]) -> list[dict[str, Any]]:
    axes = [[(k, v) for v in (cfg[k] if isinstance(cfg[k], list) else [cfg[k]])] for k in SWEEP_KEYS]
    return [{**cfg, **dict(combo)} for combo in itertools.product(*axes)]


def sim_config(cfg: dict[str, Any]) -> SimConfig:
    target = build_model(cfg, "target")
    draft = build_model(cfg, "draft", target)
    latency = LatencyModel(
        rtt_ms=float(cfg["rtt_ms"]), rtt_jitter=float(cfg["jitter"]), draft_pass_ms=float(cfg["draft_pass_ms"]),
        edge_batch=int(cfg["edge_batch"]), edge_contention=float(cfg["edge_contention"]),
        verify_ms=float(cfg["verify_ms"]), verify_slope=float(cfg["verify_slope"]),
        server_draft_ms=float(cfg["server_draft_ms"]), layer_split_edge_ms=float(cfg["layer_split_edge_ms"]),
        layer_split_server_ms=float(cfg["layer_split_server_ms"]),
        autoregressive_step_ms=float(cfg["autoregressive_step_ms"]))
    eos = int(cfg["eos_token"])
    limit = float(cfg["time_limit_ms"])
    sc = SimConfig(
        target, draft, mode=cfg["mode"], seed=int(cfg["seed"]), sessions=int(cfg["sessions"]),
        prompt_len=int(cfg["prompt_len"]), max_new_tokens=int(cfg["max_new_tokens"]),
        eos_token=None if eos < 0 else eos, budget=int(cfg["tree.budget"]), branching=int(cfg["tree.branching"]),
        depth_policy=cfg["depth.policy"], depth=int(cfg["depth.fixed"]), proactive=bool(cfg["proactive.enabled"]),
        proactive_policy=cfg["proactive.policy"], proactive_reuse=cfg["proactive.reuse"],
        proactive_budget=int(cfg["proactive.budget"]) or None, verify_capacity=int(cfg["verify_capacity"]),
        latency=latency, time_limit_ms=limit if limit > 0 else float("inf"))
    sc.validate()
    return sc


def pricing_config(cfg: dict[str, Any]) -> PricingConfig:
    return PricingConfig(float(cfg["pricing.server_rate"]), float(cfg["pricing.edge_rate"]),
                         int(cfg["pricing.edges_per_request"]))


# -- wire mode inside one process

def run_wire(cfg: dict[str, Any]) -> tuple[dict[int, tuple[int, ...]], list[RoundRecord]]:
    """Run a server and all sessions' edges over loopback TCP; returns tokens and rounds."""
    from .wire import EdgeConfig, ServerConfig, VerifyServer, edge_session

    sc = sim_config(cfg)

    async def main():
        server = VerifyServer(sc.target, ServerConfig(sc.seed, sc.verify_capacity,
                                                      sc.latency.verify_ms if cfg["wire.pace"] else 0.0,
                                                      sc.latency.verify_slope))
        host, port = await server.start(cfg["wire.host"], 0)
        try:
            edges = [edge_session(host, port, sc.draft, edge_config(cfg, sc, s)) for s in range(sc.sessions)]
            return await asyncio.gather(*edges)
        finally:
            await server.close()

    results = asyncio.run(main())
    tokens = {r.session: r.tokens for r in results}
    rounds = [row for r in results for row in r.rounds]
    return tokens, rounds


def edge_config(cfg: dict[str, Any], sc: SimConfig, session: int):
    from .wire import EdgeConfig

    lat = sc.latency
    policy = (DepthPolicy("fixed", sc.depth) if sc.depth_policy == "fixed" else
              DepthPolicy("auto", verify_ms=lat.verify(1), draft_pass_ms=lat.draft_pass(), rtt_ms=lat.rtt_ms))
    prompt = session_prompt(sc.seed, session, sc.prompt_len, sc.target.vocab_size)
    return EdgeConfig(session, prompt, sc.max_new_tokens, sc.eos_token,
                      DraftParams(sc.budget, sc.branching, sc.depth), policy,
                      sc.mode == "specedge" and sc.proactive, sc.proactive_policy, sc.proactive_reuse,
                      sc.proactive_budget, lat.draft_pass() if cfg["wire.pace"] else 0.0)


# -- CSV output

def _fmt(v: Any) -> Any:
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return v


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


RUN_COLUMNS = ["run", "mode", "rtt_ms", "seed", "sessions", "verify_capacity", "server_rate", "edge_rate",
               "edges_per_request", "warmup_rounds"]
ROUND_COLUMNS = ["run"] + [f.name for f in fields(RoundRecord)]
COMMIT_COLUMNS = ["run"] + [f.name for f in fields(CommitRow)]
SCHED_COLUMNS = ["run", "time_ms", "event", "sessions", "batch_size", "padded_len"]
EVENT_COLUMNS = ["run", "time_ms", "seq", "kind", "session", "detail"]


@dataclass
class RunOutput:
    meta: dict[str, Any]
    trace: Trace
    events: list = field(default_factory=list)
    outputs: dict[int, tuple[int, ...]] = field(default_factory=dict)


def summarize(meta: dict[str, Any], trace: Trace) -> dict[str, Any]:
    pricing = PricingConfig(float(meta["server_rate"]), float(meta["edge_rate"]), int(meta["edges_per_request"]))
    m = compute_metrics(trace, pricing, int(meta["verify_capacity"]), str(meta["mode"]).startswith("server_only"),
                        int(meta["warmup_rounds"]))
    depths = [r.depth for r in trace.rounds]
    depth = statistics.mode(depths) if depths else 0
    return {"mode": meta["mode"], "rtt_ms": float(meta["rtt_ms"]), "depth": depth, "sessions": int(meta["sessions"]),
            "itl_mean_ms": m.itl_mean_ms, "itl_p50_ms": m.itl_p50_ms, "throughput_tok_s": m.server_throughput,
            "tpv_mean": m.tpv_mean, "tpv_std": m.tpv_std, "p_align": m.p_align, "busy_frac": m.server_busy_fraction,
            "cost_k_tok_per_usd": m.cost_k_tokens_per_dollar, "seed": int(meta["seed"])}


def run_one(cfg: dict[str, Any], run: int = 0) -> RunOutput:
    meta = {"run": run, "mode": cfg["mode"], "rtt_ms": float(cfg["rtt_ms"]), "seed": int(cfg["seed"]),
            "sessions": int(cfg["sessions"]), "verify_capacity": int(cfg["verify_capacity"]),
            "server_rate": float(cfg["pricing.server_rate"]), "edge_rate": float(cfg["pricing.edge_rate"]),
            "edges_per_request": int(cfg["pricing.edges_per_request"]),
            "warmup_rounds": int(cfg["warmup_rounds"])}
    log.info("run %d: mode=%s rtt=%s seed=%s", run, cfg["mode"], cfg["rtt_ms"], cfg["seed"])
    if cfg["transport"] == "wire":
        tokens, rounds = run_wire(cfg)
        commits = []
        for r in sorted(rounds, key=lambda r: (r.session, r.round)):
            start = sum(x.accepted_len + 1 for x in rounds if x.session == r.session and x.round < r.round)
            for i in range(start, min(start + r.accepted_len + 1, len(tokens[r.session]))):
                commits.append(CommitRow(r.session, i, tokens[r.session][i], r.commit_ms))
        return RunOutput(meta, Trace(commits, rounds), [], tokens)
    if cfg["transport"] != "sim":
        raise ConfigError(f"unknown transport {cfg['transport']!r}")
    result = run_simulation(sim_config(cfg))
    return RunOutput(meta, Trace.from_result(result), result.events, result.outputs)


def run_experiment(config_path: str | os.PathLike | None, out_dir: str | os.PathLike,
                   overrides: dict[str, Any] | None = None) -> list[dict[str, Any]]:
    """Run every point of the config's sweep and write CSVs under ``out_dir``."""
    cfg = load_config(config_path, overrides)
    runs = [run_one(point, i) for i, point in enumerate(_sweep(cfg))]
    summary = [summarize(r.meta, r.trace) for r in runs]
    write_outputs(Path(out_dir), runs, summary)
    return summary


def write_outputs(out: Path, runs: list[RunOutput], summary: list[dict[str, Any]]) -> None:
    write_atomic(out / "runs.csv", _csv_text(RUN_COLUMNS, ([r.meta[c] for c in RUN_COLUMNS] for r in runs)))
    write_atomic(out / "rounds.csv", _csv_text(ROUND_COLUMNS, (
        [r.meta["run"]] + list(asdict(x).values()) for r in runs for x in r.trace.rounds)))
    write_atomic(out / "commits.csv", _csv_text(COMMIT_COLUMNS, (
        [r.meta["run"]] + list(asdict(x).values()) for r in runs for x in r.trace.commits)))
    write_atomic(out / "scheduler.csv", _csv_text(SCHED_COLUMNS, (
        [r.meta["run"], x.time_ms, x.event, x.sessions, x.batch_size, x.padded_len]
        for r in runs for x in r.trace.scheduler)))
    write_atomic(out / "events.csv", _csv_text(EVENT_COLUMNS, (
        [r.meta["run"], x.time_ms, x.seq, x.kind, x.session, x.detail] for r in runs for x in r.events)))
    write_atomic(out / "summary.csv", _csv_text(SUMMARY_COLUMNS, ([s[c] for c in SUMMARY_COLUMNS] for s in summary)))


# -- report: recompute from CSVs

def _read(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v: str) -> float:
    return float(v)


def load_traces(out_dir: str | os.PathLike) -> list[tuple[dict[str, Any], Trace]]:
    out = Path(out_dir)
    metas = _read(out / "runs.csv")
    rounds, commits, sched = {}, {}, {}
    for row in _read(out / "rounds.csv"):
        rounds.setdefault(row["run"], []).append(RoundRecord(
            int(row["session"]), int(row["round"]), _num(row["submit_ms"]), _num(row["commit_ms"]),
            int(row["depth"]), int(row["fresh_passes"]), int(row["tree_size"]), int(row["accepted_len"]),
            int(row["bonus"]), bool(int(row["path_aligned"])), bool(int(row["aligned"])), int(row["preserved"]),
            int(row["t_draft"]), int(row["h_expan"])))
    for row in _read(out / "commits.csv"):
        commits.setdefault(row["run"], []).append(CommitRow(
            int(row["session"]), int(row["index"]), int(row["token"]), _num(row["time_ms"])))
    for row in _read(out / "scheduler.csv"):
        sched.setdefault(row["run"], []).append(SchedRow(
            _num(row["time_ms"]), row["event"], tuple(int(s) for s in row["sessions"].split()),
            int(row["batch_size"]), int(row["padded_len"])))
    return [(m, Trace(commits.get(m["run"], []), rounds.get(m["run"], []), sched.get(m["run"], [])))
            for m in metas]


def report(out_dir: str | os.PathLike) -> list[dict[str, Any]]:
    return [summarize(meta, trace) for meta, trace in load_traces(out_dir)]


def format_summary(summary: list[dict[str, Any]]) -> str:
    return _csv_text(SUMMARY_COLUMNS, ([s[c] for c in SUMMARY_COLUMNS] for s in summary))
