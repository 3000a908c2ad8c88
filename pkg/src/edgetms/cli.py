"""Command-line entry point: ``edgetms <command> ...``.

Exit codes: 0 ok, 1 runtime error or failed invariant, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from collections.abc import Sequence

from .agent import AgentConfig, EdgeAgent, load_agent_configs
from .api import TwinApiServer, parse_signature_query
from .bus import Bus
from .core import NodeId
from .dispatch import Dispatcher, SyntheticSettings, TelemetryLog, load_rules
from .perf import (
    DEFAULT_BANDWIDTH_BPS,
    DEFAULT_CLOUD_INFERENCE_MS,
    DEFAULT_FPS,
    DEFAULT_FRAME_BYTES,
    DEFAULT_OVERHEAD,
    DeploymentConfig,
    LinkModel,
    compare,
)
from .codec import MESSAGE_SIZE
from .profiles import PLACEHOLDER_MAP, PROFILES, get_profile
from .scenario import ScenarioConfig, ScenarioError, run_scenario
from .twins import TwinError, TwinStore

log = logging.getLogger("edgetms")

DATA_DIR_ENV = "TMS_DATA_DIR"


class CliError(Exception):
    """Runtime failure reported as exit code 1."""


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgetms", description="Edge-intelligence traffic monitoring toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario in virtual time")
    sim.add_argument("scenario", help="scenario JSON file")
    sim.add_argument("--seed", type=int, help="override the scenario rng_seed")
    sim.add_argument("--out", help="write the JSON report here")
    sim.add_argument("--json", action="store_true", help="print the JSON report instead of the table")

    cmp_ = sub.add_parser("compare", help="edge-vs-cloud traffic and latency model")
    cmp_.add_argument("--fps", type=float, default=DEFAULT_FPS)
    cmp_.add_argument("--frame-bytes", type=int, default=DEFAULT_FRAME_BYTES)
    cmp_.add_argument("--message-bytes", type=int, default=MESSAGE_SIZE)
    cmp_.add_argument("--bandwidth-mbps", type=float, default=DEFAULT_BANDWIDTH_BPS / 1e6)
    cmp_.add_argument("--overhead", type=float, default=DEFAULT_OVERHEAD)
    cmp_.add_argument("--cloud-infer-ms", type=float, default=DEFAULT_CLOUD_INFERENCE_MS)
    cmp_.add_argument("--edge-profile", default="mtd", choices=sorted(PROFILES))
    out = cmp_.add_mutually_exclusive_group()
    out.add_argument("--json", action="store_true")
    out.add_argument("--table", action="store_true", help="fixed-width table (default)")

    srv = sub.add_parser("serve", help="agents + bus + dispatcher + twin HTTP API on real time")
    srv.add_argument("--twin-api-addr", default="127.0.0.1:8080", help="host:port for the twin API")
    srv.add_argument("--agents", help="agent config JSON (object or array)")
    srv.add_argument("--rules", help="rules JSON file")
    srv.add_argument("--data-dir", help=f"store location (default ${DATA_DIR_ENV}, else in memory)")
    srv.add_argument("--tick-ms", type=int, default=50, help="event loop period")
    srv.add_argument("--duration", type=float, help="stop after this many seconds")

    twin = sub.add_parser("twin", help="inspect or edit the twin store")
    twin.add_argument("--data-dir", help=f"store location (default ${DATA_DIR_ENV})")
    # accepted after the twin subcommand too
    where = argparse.ArgumentParser(add_help=False)
    where.add_argument("--data-dir", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    tsub = twin.add_subparsers(dest="twin_command", required=True)
    tget = tsub.add_parser("get", parents=[where])
    tget.add_argument("twin_id")
    tset = tsub.add_parser("set", parents=[where])
    tset.add_argument("twin_id")
    tset.add_argument("path")
    tset.add_argument("value", help="JSON scalar; bare words are taken as strings")
    tsig = tsub.add_parser("signatures", parents=[where])
    tsig.add_argument("twin_id")
    tsig.add_argument("--from", dest="from_ms", type=int)
    tsig.add_argument("--to", dest="to_ms", type=int)
    tsig.add_argument("--sources", help="comma-separated source names")
    tsig.add_argument("--min-quality", type=float)
    tsig.add_argument("--limit", type=int)
    tsig.add_argument("--wr", type=float, help="recency weight in [0, 1]")

    prof = sub.add_parser("profiles", help="detector profiles")
    psub = prof.add_subparsers(dest="profiles_command", required=True)
    psub.add_parser("list")
    return p


# -- commands ----------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        cfg = ScenarioConfig.load(args.scenario)
    except FileNotFoundError as exc:
        raise CliError(f"scenario file not found: {exc.filename}") from exc
    except (json.JSONDecodeError, ValueError, KeyError) as exc:
        raise CliError(f"invalid scenario {args.scenario}: {exc}") from exc
    if args.seed is not None:
        cfg.rng_seed = args.seed
    if args.out:
        cfg.report_path = args.out
    report = run_scenario(cfg)
    print(report.to_json() if args.json else report.to_table(), end="" if not args.json else "\n")
    for v in report.invariant_violations:
        log.error("invariant violated: %s", v)
    return 0 if report.ok else 1


def _deployments(args: argparse.Namespace) -> tuple[DeploymentConfig, DeploymentConfig]:
    link = LinkModel(bandwidth_bps=args.bandwidth_mbps * 1e6, overhead_factor=args.overhead)
    common = dict(
        fps=args.fps,
        frame_bytes=args.frame_bytes,
        message_bytes=args.message_bytes,
        edge_profile=get_profile(args.edge_profile),
        cloud_inference_ms=args.cloud_infer_ms,
        uplink=link,
    )
    return DeploymentConfig("edge", **common), DeploymentConfig("cloud", **common)


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        edge, cloud = _deployments(args)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    report = compare(edge, cloud)
    if args.json:
        print(report.to_json())
    else:
        print(report.to_table(), end="")
    return 0


def _data_dir(args: argparse.Namespace, required: bool) -> str | None:
    d = getattr(args, "data_dir", None) or os.environ.get(DATA_DIR_ENV)
    if required and not d:
        raise CliError(f"no store location: pass --data-dir or set {DATA_DIR_ENV}")
    return d


def _parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise CliError(f"--twin-api-addr must be host:port, got {addr!r}")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise CliError(f"bad port in {addr!r}") from None


def cmd_serve(args: argparse.Namespace) -> int:
    host, port = _parse_addr(args.twin_api_addr)
    try:
        agent_cfgs = load_agent_configs(args.agents) if args.agents else [AgentConfig(NodeId.random(), "site0")]
        rules = load_rules(args.rules) if args.rules else []
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"bad serve configuration: {exc}") from exc
    if args.tick_ms <= 0:
        raise CliError("--tick-ms must be positive")

    data_dir = _data_dir(args, required=False)
    now_ms = int(time.time() * 1000)
    # Live mode: agents start on the wall clock.
    agents = [EdgeAgent(dataclasses.replace(c, start_ms=now_ms)) for c in agent_cfgs]
    store = TwinStore(data_dir)
    tlog = TelemetryLog(os.path.join(data_dir, "telemetry.log") if data_dir else None)
    bus = Bus()
    dispatcher = Dispatcher(store, bus, rules, tlog, SyntheticSettings())
    inbox = bus.subscribe("tms/#")
    try:
        server = TwinApiServer(store, host, port).start()
    except OSError as exc:
        store.close()
        raise CliError(f"cannot bind twin API on {host}:{port}: {exc}") from exc
    log.info("twin API listening on %s (%d agents)", server.url, len(agents))
    print(f"twin API listening on {server.url}", flush=True)

    deadline = time.monotonic() + args.duration if args.duration is not None else None
    try:
        while deadline is None or time.monotonic() < deadline:
            t = int(time.time() * 1000)
            for agent in agents:
                for topic, payload in agent.publish_tick(t):
                    bus.publish(topic, payload)
            for topic, payload in inbox.drain():
                dispatcher.dispatch(topic, payload)
            time.sleep(args.tick_ms / 1000.0)
    except KeyboardInterrupt:
        log.info("interrupted")
    finally:
        server.stop()
        bus.close()
        for topic, payload in inbox.drain():
            dispatcher.dispatch(topic, payload)
        store.close()
        tlog.close()
    stats = dispatcher.stats
    log.info("dispatched %s; dead-lettered %s", dict(stats.routed), dict(stats.dead_lettered))
    return 0 if stats.conserved() else 1


def _scalar(text: str) -> object:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_twin(args: argparse.Namespace) -> int:
    store = TwinStore(_data_dir(args, required=True))
    try:
        if args.twin_command == "get":
            print(json.dumps(store.get_twin(args.twin_id).to_dict(), indent=2, sort_keys=True))
        elif args.twin_command == "set":
            rev = store.set_property(args.twin_id, args.path, _scalar(args.value))
            print(json.dumps({"twin_id": args.twin_id, "path": args.path, "revision": rev}))
        else:
            params = {
                "from": args.from_ms,
                "to": args.to_ms,
                "sources": args.sources,
                "min_quality": args.min_quality,
                "limit": args.limit,
                "wr": args.wr,
            }
            query = "&".join(f"{k}={v}" for k, v in params.items() if v is not None)
            if not store.has_twin(args.twin_id):
                raise CliError(f"twin not found: {args.twin_id}")
            try:
                q = parse_signature_query(args.twin_id, query)
            except Exception as exc:
                raise CliError(str(exc)) from exc
            rows = [dataclasses.asdict(r) for r in store.select_signatures(q)]
            print(json.dumps(rows, indent=2, sort_keys=True))
    except TwinError as exc:
        raise CliError(f"{exc.code}: {exc}") from exc
    finally:
        store.close()
    return 0


def cmd_profiles(args: argparse.Namespace) -> int:
    print(f"{'name':<20}{'latency_ms':>12}{'map':>8}  note")
    for name, p in PROFILES.items():
        note = "placeholder mAP" if name in PLACEHOLDER_MAP else ""
        print(f"{name:<20}{p.inference_latency_ms:>12.1f}{p.map_score:>8.3f}  {note}".rstrip())
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "serve": cmd_serve,
    "twin": cmd_twin,
    "profiles": cmd_profiles,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ScenarioError) as exc:
        print(f"edgetms: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
