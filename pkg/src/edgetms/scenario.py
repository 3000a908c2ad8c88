"""Deterministic discrete-event runner: agents -> bus -> dispatcher -> twin store.

Virtual time only; nothing here reads the wall clock except the runtime
measurement stored in the report.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import os
import time
from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .agent import AgentConfig, EdgeAgent
from .bus import Bus
from .core import DAY_MS
from .dispatch import AlarmRaised, Dispatcher, Rule, SyntheticSettings, TelemetryLog, load_rules, topic_class
from .perf import ComparisonReport, DeploymentConfig, LinkModel, compare
from .profiles import get_profile
from .twins import TwinStore


class ScenarioError(ValueError):
    pass


def _deployment(d: Mapping | None, mode: str) -> DeploymentConfig:
    d = dict(d or {})
    link = LinkModel(**d.pop("uplink", {}))
    if "edge_profile" in d:
        d["edge_profile"] = get_profile(d["edge_profile"])
    return DeploymentConfig(mode=mode, uplink=link, **d)


@dataclass
class ScenarioConfig:
    duration_ms: int
    agents: list[AgentConfig]
    rules: list[Rule] = field(default_factory=list)
    edge: DeploymentConfig = field(default_factory=lambda: DeploymentConfig("edge"))
    cloud: DeploymentConfig = field(default_factory=lambda: DeploymentConfig("cloud"))
    rng_seed: int | None = None
    report_path: str | None = None
    data_dir: str | None = None
    synthetic: SyntheticSettings | None = field(default_factory=SyntheticSettings)

    def validate(self) -> None:
        if self.duration_ms <= 0:
            raise ScenarioError("duration_ms must be positive")
        if not self.agents:
            raise ScenarioError("at least one agent is required")
        nodes = [a.node for a in self.agents]
        if len(set(nodes)) != len(nodes):
            raise ScenarioError("duplicate node ids")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | os.PathLike = ".") -> ScenarioConfig:
        try:
            rules_ref = d.get("rules", [])
            if isinstance(rules_ref, str):
                rules = load_rules(Path(base_dir) / rules_ref)
            else:
                rules = [Rule.from_dict(r) for r in rules_ref]
            dep = d.get("deployment", {})
            synth = d.get("synthetic", {})
            cfg = cls(
                duration_ms=int(d["duration_ms"]),
                agents=[AgentConfig.from_dict(a) for a in d.get("agents", [])],
                rules=rules,
                edge=_deployment(dep.get("edge"), "edge"),
                cloud=_deployment(dep.get("cloud"), "cloud"),
                rng_seed=d.get("rng_seed"),
                report_path=d.get("report"),
                data_dir=d.get("data_dir"),
                synthetic=None if synth is None else SyntheticSettings(**synth),
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"bad scenario config: {exc!r}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> ScenarioConfig:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)


@dataclass
class ScenarioReport:
    duration_ms: int
    per_node: dict[str, dict[str, dict[str, int]]]
    system: dict[str, dict[str, int]]
    alarms: list[dict]
    twins: dict[str, dict]
    comparison: ComparisonReport
    dispatch: dict[str, dict[str, int]]
    invariant_violations: list[str]
    wall_clock_s: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.invariant_violations

    def total(self, kind: str, what: str = "bytes") -> int:
        return sum(n.get(kind, {}).get(what, 0) for n in self.per_node.values())

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        d = {
            "duration_ms": self.duration_ms,
            "per_node": self.per_node,
            "system": self.system,
            "alarms": self.alarms,
            "twins": self.twins,
            "comparison": self.comparison.to_dict(),
            "dispatch": self.dispatch,
            "invariant_violations": self.invariant_violations,
        }
        if include_wall_clock:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def to_json(self, include_wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_clock), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'node':<42}{'class':<12}{'messages':>12}{'bytes':>16}"]
        lines.append("-" * 82)
        for node, classes in sorted(self.per_node.items()):
            for kind, c in sorted(classes.items()):
                lines.append(f"{node:<42}{kind:<12}{c['messages']:>12,}{c['bytes']:>16,}")
        for kind, c in sorted(self.system.items()):
            lines.append(f"{'(system)':<42}{kind:<12}{c['messages']:>12,}{c['bytes']:>16,}")
        lines.append("")
        lines.append(f"alarms: {len(self.alarms)}")
        lines.append(f"invariants: {'ok' if self.ok else '; '.join(self.invariant_violations)}")
        lines.append("")
        return "\n".join(lines) + "\n" + self.comparison.to_table()


class _Meter:
    def __init__(self) -> None:
        self.per_node: dict[str, dict[str, dict[str, int]]] = defaultdict(
            lambda: defaultdict(lambda: {"messages": 0, "bytes": 0})
        )
        self.system: dict[str, dict[str, int]] = defaultdict(lambda: {"messages": 0, "bytes": 0})

        self._slots: dict[str, dict[str, int]] = {}

    def count(self, topic: str, payload: bytes) -> None:
        slot = self._slots.get(topic)
        if slot is None:
            kind = topic_class(topic)
            if kind in ("alarm", "deadletter", "other"):
                slot = self.system[kind]
            else:
                slot = self.per_node[topic.split("/", 3)[2]][kind]
            if len(self._slots) < 4096:
                self._slots[topic] = slot
        slot["messages"] += 1
        slot["bytes"] += len(payload)

    def freeze(self) -> tuple[dict, dict]:
        per_node = {n: {k: dict(v) for k, v in c.items()} for n, c in self.per_node.items()}
        return per_node, {k: dict(v) for k, v in self.system.items()}


def emit_comparison(cfg: ScenarioConfig, measured_edge_bytes: int | None = None) -> ComparisonReport:
    """Analytic comparison, optionally cross-checked with scenario-measured
    per-node inference bytes extrapolated to one day."""
    report = compare(cfg.edge, cfg.cloud)
    if measured_edge_bytes is not None:
        per_day = measured_edge_bytes * DAY_MS / cfg.duration_ms / len(cfg.agents)
        report = report.with_measurement(per_day)
    return report


def _with_seed(agent: AgentConfig, seed: int, index: int) -> AgentConfig:
    if agent.traffic is None:
        return agent
    traffic = dataclasses.replace(agent.traffic, rng_seed=(seed * 1_000_003 + index) & 0xFFFFFFFFFFFFFFFF)
    return dataclasses.replace(agent, traffic=traffic)


def run_scenario(cfg: ScenarioConfig) -> ScenarioReport:
    cfg.validate()
    started = time.perf_counter()
    agent_cfgs = cfg.agents
    if cfg.rng_seed is not None:
        agent_cfgs = [_with_seed(a, int(cfg.rng_seed), i) for i, a in enumerate(agent_cfgs)]
    agents = [EdgeAgent(a) for a in agent_cfgs]

    bus = Bus()
    store = TwinStore(cfg.data_dir)
    tlog = TelemetryLog(Path(cfg.data_dir) / "telemetry.log" if cfg.data_dir else None)
    dispatcher = Dispatcher(store, bus, cfg.rules, tlog, cfg.synthetic)
    inbox = bus.subscribe("tms/#")
    meter = _Meter()

    start = min(a.cfg.start_ms for a in agents)
    end = start + cfg.duration_ms
    # Ties in virtual time resolve by node id.
    order = sorted(range(len(agents)), key=lambda i: agents[i].node)
    heap = [(agents[i].next_due_ms(), rank, i) for rank, i in enumerate(order)]
    heapq.heapify(heap)
    violations: list[str] = []
    last_t = 0

    while heap:
        due, rank, i = heapq.heappop(heap)
        if due >= end:
            continue
        if due < last_t:
            violations.append(f"virtual time went backwards at {due}")
        last_t = due
        agent = agents[i]
        for topic, payload in agent.publish_tick(int(due)):
            bus.publish(topic, payload)
            # Drain after every publish so dispatcher output stays causally ordered.
            for t, p in inbox.drain():
                meter.count(t, p)
                for eff in dispatcher.dispatch(t, p):
                    if type(eff) is AlarmRaised and eff.event.raised_ms < due:
                        violations.append(f"alarm {eff.event.rule_id} raised before its cause")
        nxt = agent.next_due_ms()
        if nxt < end:
            heapq.heappush(heap, (nxt, rank, i))

    for t, p in inbox.drain():
        meter.count(t, p)
        dispatcher.dispatch(t, p)
    bus.close()

    per_node, system = meter.freeze()
    stats = dispatcher.stats
    if not stats.conserved():
        violations.append("dead-letter conservation violated")
    for kind in ("inference", "telemetry"):
        published = sum(n.get(kind, {}).get("messages", 0) for n in per_node.values())
        if published != stats.received[kind]:
            violations.append(f"{kind}: published {published} != received {stats.received[kind]}")

    measured = sum(n.get("inference", {}).get("bytes", 0) for n in per_node.values())
    comparison = emit_comparison(cfg, measured)
    twins = {tid: store.get_twin(tid).to_dict() for tid in store.list_twins()}
    store.close()
    tlog.close()

    report = ScenarioReport(
        duration_ms=cfg.duration_ms,
        per_node=per_node,
        system=system,
        alarms=[a.to_dict() for a in dispatcher.alarms],
        twins=twins,
        comparison=comparison,
        dispatch={
            "received": dict(stats.received),
            "routed": dict(stats.routed),
            "dead_lettered": dict(stats.dead_lettered),
        },
        invariant_violations=violations,
        wall_clock_s=time.perf_counter() - started,
    )
    if cfg.report_path:
        Path(cfg.report_path).write_text(report.to_json(), encoding="utf-8")
    return report
