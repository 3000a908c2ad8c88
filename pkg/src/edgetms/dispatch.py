"""Fog-side dispatcher: decodes bus traffic, updates twins, logs telemetry,
evaluates alarm rules and runs synthetic sensing.

The dispatcher is a single logical consumer, so rule and window state need no
locking.
"""

from __future__ import annotations

import functools
import json
import logging
import operator
import os
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .bus import ALARM_TOPIC, DEADLETTER_TOPIC, Bus, TopicFilter, topic_matches
from .codec import CodecError, unpack_inference, encode_telemetry_line, parse_telemetry_line
from .core import VEHICLE_CLASSES, NodeId, Source, TelemetryReading
from .synthetic import (
    DEFAULT_WEIGHTS,
    DEFAULT_WINDOW_MS,
    NoUsableSignatures,
    NormalizationWindow,
    TrafficEstimate,
    detect_anomaly,
    select_and_estimate,
)
from .twins import TwinStore

log = logging.getLogger(__name__)

COMPARATORS = {">": operator.gt, "<": operator.lt, ">=": operator.ge, "<=": operator.le}
COMPARATORS["≥"] = operator.ge
COMPARATORS["≤"] = operator.le


# -- rules -----------------------------------------------------------------


@dataclass(frozen=True)
class RaiseAlarm:
    severity: str = "warning"
    message_template: str = "{rule_id}: {source} {value} at {node}"


@dataclass(frozen=True)
class SetTwinProperty:
    path: str
    # "$value" copies the reading's value; anything else is a JSON literal.
    value_expr: str = "$value"

    def resolve(self, reading: TelemetryReading) -> object:
        if self.value_expr == "$value":
            return reading.value
        return json.loads(self.value_expr)


@dataclass(frozen=True)
class Rule:
    id: str
    filter: TopicFilter
    source: Source
    comparator: str
    threshold: float
    sustain_ms: int = 0
    action: RaiseAlarm | SetTwinProperty = field(default_factory=RaiseAlarm)

    def __post_init__(self) -> None:
        if isinstance(self.filter, str):
            object.__setattr__(self, "filter", TopicFilter.parse(self.filter))
        object.__setattr__(self, "source", Source(self.source))
        if self.comparator not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        if not float("-inf") < self.threshold < float("inf"):
            raise ValueError("threshold must be finite")
        if self.sustain_ms < 0:
            raise ValueError("sustain_ms must be non-negative")

    def violated_by(self, value: float) -> bool:
        return COMPARATORS[self.comparator](value, self.threshold)

    @classmethod
    def from_dict(cls, d: Mapping) -> Rule:
        act = dict(d.get("action") or {"type": "raise_alarm"})
        kind = act.pop("type", "raise_alarm")
        if kind == "raise_alarm":
            if "message" in act:
                act["message_template"] = act.pop("message")
            action: RaiseAlarm | SetTwinProperty = RaiseAlarm(**act)
        elif kind == "set_twin_property":
            if "value" in act:
                act["value_expr"] = act.pop("value")
            action = SetTwinProperty(**act)
        else:
            raise ValueError(f"unknown rule action {kind!r}")
        source = d["source"]
        return cls(
            id=d["id"],
            filter=d.get("filter", f"tms/+/+/telemetry/{source}"),
            source=source,
            comparator=d["comparator"],
            threshold=float(d["threshold"]),
            sustain_ms=int(d.get("sustain_ms", 0)),
            action=action,
        )


def load_rules(path: str | os.PathLike) -> list[Rule]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("rules file must hold a JSON array")
    return [Rule.from_dict(d) for d in data]


@dataclass(frozen=True)
class AlarmEvent:
    rule_id: str
    node: NodeId
    source: str
    first_violation_ms: int
    raised_ms: int
    value: float
    severity: str
    message: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["node"] = self.node.hex
        return d


@dataclass
class _Episode:
    first_ms: int
    fired: bool = False


class RuleEngine:
    """Sustained-threshold rules with one firing per violation episode."""

    def __init__(self, rules: Iterable[Rule] = ()):
        self.rules = list(rules)
        self._episodes: dict[tuple[str, NodeId, Source], _Episode] = {}

    def evaluate(
        self, reading: TelemetryReading, topic: str | None = None
    ) -> list[tuple[Rule, AlarmEvent]]:
        fired = []
        for rule in self.rules:
            if rule.source != reading.source:
                continue
            if topic is not None and not topic_matches(rule.filter, topic):
                continue
            key = (rule.id, reading.node, reading.source)
            if not rule.violated_by(reading.value):
                self._episodes.pop(key, None)
                continue
            ep = self._episodes.get(key)
            if ep is None:
                ep = self._episodes[key] = _Episode(reading.timestamp_ms)
            if not ep.fired and reading.timestamp_ms - ep.first_ms >= rule.sustain_ms:
                ep.fired = True
                sev = rule.action.severity if isinstance(rule.action, RaiseAlarm) else "info"
                msg = ""
                if isinstance(rule.action, RaiseAlarm):
                    msg = rule.action.message_template.format(
                        rule_id=rule.id, source=reading.source.value, value=reading.value, node=reading.node.hex
                    )
                fired.append(
                    (
                        rule,
                        AlarmEvent(
                            rule.id,
                            reading.node,
                            reading.source.value,
                            ep.first_ms,
                            reading.timestamp_ms,
                            reading.value,
                            sev,
                            msg,
                        ),
                    )
                )
        return fired


def evaluate_rules(
    engine: RuleEngine, reading: TelemetryReading, topic: str | None = None
) -> list[tuple[Rule, AlarmEvent]]:
    return engine.evaluate(reading, topic)


# -- effects ---------------------------------------------------------------


@dataclass(frozen=True)
class TwinUpdate:
    """Leaves written in one revision; keys are relative to ``prefix``."""

    twin_id: str
    properties: Mapping[str, object]
    revision: int
    prefix: str = ""

    def paths(self) -> dict[str, object]:
        return {self.prefix + k: v for k, v in self.properties.items()}


@dataclass(frozen=True)
class SignatureAppended:
    twin_id: str
    source: str
    sequence: int


@dataclass(frozen=True)
class TelemetryLogged:
    line: str


@dataclass(frozen=True)
class AlarmRaised:
    event: AlarmEvent


@dataclass(frozen=True)
class DeadLetter:
    topic: str
    reason: str
    payload: bytes


@dataclass(frozen=True)
class TrafficEstimated:
    estimate: TrafficEstimate


@dataclass(frozen=True)
class AnomalyDetected:
    twin_id: str
    source: str
    timestamp_ms: int
    value: float
    z: float


_TRAFFIC = "features/traffic/properties/"
_ENVIRONMENT = "features/environment/properties/"
_CLASS_KEYS = tuple(f"count_{name}" for name in VEHICLE_CLASSES)


class TelemetryLog:
    """Append-only store of telemetry lines; in memory when ``path`` is None."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.lines: list[str] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                with open(self.path, encoding="utf-8") as fh:
                    self.lines = [ln.rstrip("\n") for ln in fh if ln.endswith("\n")]
            self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, line: str) -> None:
        self.lines.append(line)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()

    def __len__(self) -> int:
        return len(self.lines)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class SyntheticSettings:
    weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    window_ms: int = DEFAULT_WINDOW_MS
    estimate_period_ms: int = 60_000
    anomaly_series: int = 30
    anomaly_k: float | None = 5.0


@dataclass
class DispatchStats:
    routed: dict[str, int] = field(default_factory=lambda: {"inference": 0, "telemetry": 0})
    dead_lettered: dict[str, int] = field(default_factory=lambda: {"inference": 0, "telemetry": 0, "other": 0})
    received: dict[str, int] = field(default_factory=lambda: {"inference": 0, "telemetry": 0, "other": 0})

    def conserved(self) -> bool:
        return all(
            self.received[k] == self.routed.get(k, 0) + self.dead_lettered[k] for k in ("inference", "telemetry")
        )


@functools.lru_cache(maxsize=4096)
def topic_class(topic: str) -> str:
    levels = topic.split("/")
    if len(levels) >= 2 and levels[0] == "tms":
        if levels[1] == "$alarms":
            return "alarm"
        if levels[1] == "$deadletter":
            return "deadletter"
        if len(levels) >= 4 and levels[3] in ("inference", "telemetry", "synthetic"):
            return levels[3]
    return "other"


@dataclass(frozen=True)
class _Route:
    kind: str
    site: str = ""
    node_hex: str = ""
    source: str = ""
    error: str = ""
    twin_id: str = ""

    @functools.cached_property
    def node_bytes(self) -> bytes:
        return bytes.fromhex(self.node_hex)


@functools.lru_cache(maxsize=4096)
def _route(topic: str) -> _Route:
    kind = topic_class(topic)
    if kind not in ("inference", "telemetry"):
        return _Route(kind)
    levels = topic.split("/")
    site, node_hex = levels[1], levels[2]
    expected = 4 if kind == "inference" else 5
    if len(levels) != expected:
        return _Route(kind, error=f"malformed {kind} topic")
    try:
        NodeId.parse(node_hex)
    except ValueError:
        return _Route(kind, error="bad node id in topic")
    if len(node_hex) != 32 or node_hex != node_hex.lower():
        return _Route(kind, error="node id in topic must be 32 lowercase hex digits")
    return _Route(kind, site, node_hex, levels[4] if kind == "telemetry" else "", twin_id=f"{site}/{node_hex}")


class Dispatcher:
    def __init__(
        self,
        store: TwinStore,
        bus: Bus | None = None,
        rules: Iterable[Rule] = (),
        telemetry_log: TelemetryLog | None = None,
        synthetic: SyntheticSettings | None = None,
    ):
        self.store = store
        self.bus = bus
        self.rules = RuleEngine(rules)
        self.telemetry_log = telemetry_log if telemetry_log is not None else TelemetryLog()
        self.synthetic = synthetic
        self.stats = DispatchStats()
        self.alarms: list[AlarmEvent] = []
        self._windows: dict[tuple[str, str], NormalizationWindow] = {}
        self._series: dict[tuple[str, str], deque[float]] = {}
        self._last_estimate: dict[str, int] = {}
        self._known_twins: set[str] = set()

    # -- entry point -------------------------------------------------------

    def dispatch(self, topic: str, payload: bytes) -> list[object]:
        """Route one bus message. Never raises on bad input; it becomes a dead letter."""
        route = _route(topic)
        kind = route.kind
        if kind in ("alarm", "deadletter", "synthetic"):
            return []  # our own output
        if kind not in ("inference", "telemetry"):
            self.stats.received["other"] += 1
            return [self._dead_letter(topic, payload, "unroutable topic", "other")]
        self.stats.received[kind] += 1
        try:
            if route.error:
                raise CodecError("topic", route.error)
            if kind == "inference":
                effects = self._on_inference(route, payload)
            else:
                effects = self._on_telemetry(topic, route, payload)
        except (CodecError, ValueError, UnicodeDecodeError) as exc:
            return [self._dead_letter(topic, payload, _reason(exc), kind)]
        self.stats.routed[kind] += 1
        return effects

    def _dead_letter(self, topic: str, payload: bytes, reason: str, kind: str) -> DeadLetter:
        self.stats.dead_lettered[kind] += 1
        log.debug("dead letter from %s: %s", topic, reason)
        if self.bus is not None:
            body = json.dumps({"topic": topic, "reason": reason, "payload_hex": payload.hex()})
            self.bus.publish(DEADLETTER_TOPIC, body.encode())
        return DeadLetter(topic, reason, payload)

    def _ensure(self, route: _Route, now_ms: int) -> None:
        if route.twin_id not in self._known_twins:
            self.store.ensure_twin(route.twin_id, {"site": route.site, "node": route.node_hex}, now_ms=now_ms)
            self._known_twins.add(route.twin_id)

    # -- inference ---------------------------------------------------------

    def _on_inference(self, route: _Route, payload: bytes) -> list[object]:
        packet_id, node_raw, ts, frame_seq, latency_us, total, counts, conf, _ = unpack_inference(payload)
        if node_raw != route.node_bytes:
            raise CodecError("node", "payload node does not match topic")
        twin_id = route.twin_id
        self._ensure(route, ts)
        confidence = conf / 1000.0
        props = {
            "vehicles_in_frame": total,
            "last_latency_ms": latency_us / 1000.0,
            "mean_confidence": confidence,
            "last_frame_seq": frame_seq,
            "last_packet_id": packet_id,
        }
        props.update(zip(_CLASS_KEYS, counts))
        rev = self.store.update_feature(twin_id, "traffic", props, now_ms=ts, checked=True)
        seq = self.store.append(twin_id, "inference", float(total), ts, confidence)
        return [
            TwinUpdate(twin_id, props, rev, _TRAFFIC),
            SignatureAppended(twin_id, "inference", seq),
        ]

    # -- telemetry ---------------------------------------------------------

    def _on_telemetry(self, topic: str, route: _Route, payload: bytes) -> list[object]:
        line = payload.decode("utf-8")
        reading = parse_telemetry_line(line)
        source = route.source
        if reading.source.value != source or reading.node.bytes != route.node_bytes:
            raise CodecError("topic", "payload does not match topic")
        twin_id = route.twin_id
        site, node_hex = route.site, route.node_hex
        ts = reading.timestamp_ms
        self._ensure(route, ts)
        effects: list[object] = []

        self.telemetry_log.append(encode_telemetry_line(reading))
        effects.append(TelemetryLogged(line))

        rev = self.store.update_feature(twin_id, "environment", {source: reading.value}, now_ms=ts)
        effects.append(TwinUpdate(twin_id, {source: reading.value}, rev, _ENVIRONMENT))
        seq = self.store.append(twin_id, source, reading.value, ts, reading.quality)
        effects.append(SignatureAppended(twin_id, source, seq))

        for rule, alarm in self.rules.evaluate(reading, topic):
            if isinstance(rule.action, SetTwinProperty):
                value = rule.action.resolve(reading)
                rev = self.store.set_property(twin_id, rule.action.path, value, now_ms=ts)
                effects.append(TwinUpdate(twin_id, {rule.action.path: value}, rev))
            else:
                self.alarms.append(alarm)
                effects.append(AlarmRaised(alarm))
                if self.bus is not None:
                    self.bus.publish(ALARM_TOPIC, json.dumps(alarm.to_dict(), sort_keys=True).encode())

        if self.synthetic is not None:
            effects.extend(self._synthesize(twin_id, site, node_hex, reading))
        return effects

    def _synthesize(self, twin_id: str, site: str, node_hex: str, reading: TelemetryReading) -> list[object]:
        cfg = self.synthetic
        source = reading.source.value
        ts = reading.timestamp_ms
        out: list[object] = []

        if cfg.anomaly_k is not None:
            series = self._series.get((twin_id, source))
            if series is None:
                series = self._series[(twin_id, source)] = deque(maxlen=cfg.anomaly_series)
            series.append(reading.value)
            if len(series) >= max(10, cfg.anomaly_series):
                res = detect_anomaly(series, cfg.anomaly_k)
                if res.flag:
                    out.append(AnomalyDetected(twin_id, source, ts, reading.value, res.z))
                    self._publish(
                        f"tms/{site}/{node_hex}/synthetic/anomaly",
                        {"source": source, "timestamp_ms": ts, "value": reading.value, "z": res.z},
                    )

        if source not in cfg.weights:
            return out
        win = self._windows.get((twin_id, source))
        if win is None:
            win = self._windows[(twin_id, source)] = NormalizationWindow(cfg.window_ms)
        win.add(ts, reading.value)
        last = self._last_estimate.get(twin_id)
        if last is not None and ts - last < cfg.estimate_period_ms:
            return out
        windows = {s: w for (tid, s), w in self._windows.items() if tid == twin_id}
        try:
            est = select_and_estimate(self.store, twin_id, windows, ts, cfg.weights, cfg.window_ms)
        except NoUsableSignatures:
            return out
        self._last_estimate[twin_id] = ts
        self.store.set_property(twin_id, "features/synthetic/properties/traffic_level", est.level, now_ms=ts)
        self._publish(
            f"tms/{site}/{node_hex}/synthetic/traffic_level",
            {"level": est.level, "computed_ms": ts, "contributing": list(est.contributing)},
        )
        out.append(TrafficEstimated(est))
        return out

    def _publish(self, topic: str, body: dict) -> None:
        if self.bus is not None:
            self.bus.publish(topic, json.dumps(body, sort_keys=True).encode())

    def run(self, messages: Sequence[tuple[str, bytes]]) -> list[object]:
        effects: list[object] = []
        for topic, payload in messages:
            effects.extend(self.dispatch(topic, payload))
        return effects


def _reason(exc: Exception) -> str:
    code = getattr(exc, "code", None)
    return f"{code}: {exc}" if code and str(exc) != code else (code or str(exc) or type(exc).__name__)
