"""Command-line entry point: ``specedge {sim,serve,edge,report}``."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys

from . import harness

log = logging.getLogger("specedge")


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def cmd_sim(args: argparse.Namespace) -> int:
    summary = harness.run_experiment(args.config, args.out, _overrides(args))
    sys.stdout.write(harness.format_summary(summary))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    sys.stdout.write(harness.format_summary(harness.report(args.out)))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .wire import ServerConfig, VerifyServer

    cfg = harness.load_config(args.config, _overrides(args))
    sc = harness.sim_config(cfg)

    async def main() -> None:
        server = VerifyServer(sc.target, ServerConfig(sc.seed, sc.verify_capacity,
                                                      sc.latency.verify_ms if cfg["wire.pace"] else 0.0,
                                                      sc.latency.verify_slope))
        host, port = await server.start(cfg["wire.host"], int(cfg["wire.port"]))
        log.info("serving on %s:%d", host, port)
        print(f"listening {host}:{port}", flush=True)
        await server.serve_forever()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return 0


def cmd_edge(args: argparse.Namespace) -> int:
    from .wire import edge_session

    cfg = harness.load_config(args.config, _overrides(args))
    sc = harness.sim_config(cfg)
    ecfg = harness.edge_config(cfg, sc, args.session)
    result = asyncio.run(edge_session(cfg["wire.host"], int(cfg["wire.port"]), sc.draft, ecfg))
    print(" ".join(str(t) for t in result.tokens))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specedge", description="Edge-assisted speculative decoding simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, out: bool = True) -> None:
        sp.add_argument("--config", help="TOML experiment file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; VALUE is parsed as JSON when possible")
        if out:
            sp.add_argument("--out", default="out", help="output directory for CSVs")

    sp = sub.add_parser("sim", help="run an experiment sweep and write CSVs")
    common(sp)
    sp.set_defaults(func=cmd_sim)
    sp = sub.add_parser("serve", help="run the verification server over TCP")
    common(sp, out=False)
    sp.set_defaults(func=cmd_serve)
    sp = sub.add_parser("edge", help="run one edge session against a server")
    common(sp, out=False)
    sp.add_argument("--session", type=int, default=0)
    sp.set_defaults(func=cmd_edge)
    sp = sub.add_parser("report", help="recompute the summary from CSVs in --out")
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
