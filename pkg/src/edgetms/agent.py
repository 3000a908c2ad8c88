"""Simulated edge node.

An agent owns its sensors, a synthetic traffic scene, a profile-driven
detector and a vehicle counter. ``publish_tick`` returns the (topic, payload)
pairs that became due, in time order.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
import random
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .codec import encode_telemetry_line, pack_inference
from .core import (
    DAY_MS,
    MAX_CLASSES,
    SOURCE_RANGES,
    DetectionResult,
    DetectorProfile,
    FrameTruth,
    NodeId,
    Source,
    TelemetryReading,
    TrackedObject,
)
from .profiles import get_profile

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SensorSpec:
    baseline: float
    amplitude: float = 0.0
    noise_stddev: float = 0.0
    sample_period_ms: int = 60_000
    quality_model: str = "constant"  # "constant" or "random"
    quality: float = 1.0  # constant value, or lower bound for "random"

    def __post_init__(self) -> None:
        if self.sample_period_ms <= 0:
            raise ValueError("sample period must be positive")
        if not self.noise_stddev >= 0:
            raise ValueError("noise stddev must be non-negative")
        if self.quality_model not in ("constant", "random"):
            raise ValueError(f"unknown quality model {self.quality_model!r}")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError("quality must lie in [0, 1]")


DEFAULT_SENSORS: dict[Source, SensorSpec] = {
    Source.TEMPERATURE_C: SensorSpec(18.0, 6.0, 0.3),
    Source.HUMIDITY_PCT: SensorSpec(60.0, 15.0, 2.0),
    Source.PRESSURE_HPA: SensorSpec(1013.0, 2.0, 0.5),
    Source.CO2_PPM: SensorSpec(450.0, 80.0, 15.0),
    Source.NO2_PPB: SensorSpec(25.0, 12.0, 3.0),
    Source.PM25_UGM3: SensorSpec(15.0, 8.0, 2.0),
    Source.NOISE_DB: SensorSpec(62.0, 8.0, 2.5),
}


def _check_in_range(source: Source, value: float) -> None:
    lo, hi = SOURCE_RANGES[source]
    if not lo <= value <= hi:
        raise ValueError(f"baseline {value} outside valid range of {source.value}")


def sample_telemetry(
    spec: SensorSpec, source: Source, t_ms: int, rng: random.Random, node: NodeId
) -> TelemetryReading:
    """Diurnal sinusoid plus gaussian noise, clamped to the source's range."""
    if t_ms <= 0:
        raise ValueError("t_ms must be positive")
    phase = (t_ms % DAY_MS) / DAY_MS
    value = spec.baseline + spec.amplitude * math.sin(TWO_PI * phase)
    if spec.noise_stddev > 0:
        value += rng.gauss(0.0, spec.noise_stddev)
    lo, hi = SOURCE_RANGES[source]
    value = min(hi, max(lo, value))
    if spec.quality_model == "random":
        quality = rng.uniform(spec.quality, 1.0)
    else:
        quality = spec.quality
    return TelemetryReading(node, source, value, t_ms, quality)


@dataclass(frozen=True)
class TrafficSimConfig:
    fps: float = 20.0
    mean_vehicles_per_frame: float = 4.0
    class_mix: tuple[float, ...] = (0.70, 0.05, 0.10, 0.08, 0.04, 0.03)
    track_persistence_frames: int = 20
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_mix", tuple(float(p) for p in self.class_mix))
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if not self.mean_vehicles_per_frame >= 0:
            raise ValueError("vehicle rate must be non-negative")
        if len(self.class_mix) != MAX_CLASSES or any(p < 0 for p in self.class_mix):
            raise ValueError(f"class mix needs {MAX_CLASSES} non-negative probabilities")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ValueError("class mix must sum to 1")
        if self.track_persistence_frames < 1:
            raise ValueError("track persistence must be >= 1 frame")


def poisson(rng: random.Random, lam: float) -> int:
    """Exact Poisson draw; splits large rates into chunks for Knuth's method."""
    n = 0
    while lam > 0:
        chunk = min(lam, 20.0)
        lam -= chunk
        limit = math.exp(-chunk)
        p = rng.random()
        while p > limit:
            n += 1
            p *= rng.random()
    return n


@dataclass
class TrafficState:
    frame_seq: int = 0
    next_track_id: int = 1
    # (object, frame_seq of its last appearance)
    active: list[tuple[TrackedObject, int]] = field(default_factory=list)


def next_frame_truth(
    cfg: TrafficSimConfig, state: TrafficState, rng: random.Random, timestamp_ms: int = 1
) -> FrameTruth:
    """Advance the scene by one frame.

    Arrivals are Poisson(mean / persistence) so the steady-state occupancy is
    ``mean_vehicles_per_frame``.
    """
    seq = state.frame_seq
    survivors = [tr for tr in state.active if tr[1] >= seq]
    arrivals = poisson(rng, cfg.mean_vehicles_per_frame / cfg.track_persistence_frames)
    if arrivals:
        last = seq + cfg.track_persistence_frames - 1
        for c in rng.choices(range(MAX_CLASSES), cum_weights=_cumulative(cfg.class_mix), k=arrivals):
            survivors.append((TrackedObject(state.next_track_id, c), last))
            state.next_track_id += 1
    state.active = survivors
    state.frame_seq += 1
    return FrameTruth(seq, tuple(tr[0] for tr in survivors), timestamp_ms)


@functools.lru_cache(maxsize=64)
def _cumulative(mix: tuple[float, ...]) -> tuple[float, ...]:
    return tuple(itertools.accumulate(mix))


def run_detector(
    profile: DetectorProfile, frame: FrameTruth, rng: random.Random, jitter_ms: float = 0.0
) -> DetectionResult:
    """Detect each object independently with probability ``profile.map_score``."""
    p = profile.map_score
    counts = [0] * MAX_CLASSES
    seen = []
    n_classes = len(profile.classes)
    if n_classes < MAX_CLASSES:
        for obj in frame.objects:
            if obj.class_index >= n_classes:
                raise ValueError(f"class index {obj.class_index} unknown to profile {profile.name}")
    rand = rng.random
    for obj in frame.objects:
        if rand() < p:
            counts[obj.class_index] += 1
            seen.append(obj)
    confidence = rng.uniform(p * 0.9, min(1.0, p * 1.1))
    latency = profile.inference_latency_ms
    if jitter_ms > 0:
        latency = max(1e-3, latency + rng.gauss(0.0, jitter_ms))
    return DetectionResult(frame.frame_seq, tuple(counts), len(seen), confidence, latency, tuple(seen))


class CounterError(ValueError):
    pass


@dataclass
class CounterState:
    """Cumulative per-class count of distinct tracks ever detected."""

    cumulative: list[int] = field(default_factory=lambda: [0] * MAX_CLASSES)
    counted: set[int] = field(default_factory=set)
    open_tracks: set[int] = field(default_factory=set)

    @property
    def total(self) -> int:
        return sum(self.cumulative)


def update_counter(cs: CounterState, frame: FrameTruth, det: DetectionResult) -> CounterState:
    if frame.frame_seq != det.frame_seq:
        raise CounterError(f"detection for frame {det.frame_seq} applied to frame {frame.frame_seq}")
    for obj in det.detected_tracks:
        if obj.track_id not in cs.counted:
            cs.counted.add(obj.track_id)
            cs.cumulative[obj.class_index] += 1
    cs.open_tracks = {o.track_id for o in frame.objects}
    return cs


@dataclass(frozen=True)
class AgentConfig:
    node: NodeId
    site: str
    sensors: Mapping[Source, SensorSpec] = field(default_factory=lambda: dict(DEFAULT_SENSORS))
    traffic: TrafficSimConfig | None = field(default_factory=TrafficSimConfig)
    profile: str = "mtd"
    start_ms: int = 1_700_000_000_000
    latency_jitter_ms: float = 0.0

    def __post_init__(self) -> None:
        if not self.site or "/" in self.site or "+" in self.site or "#" in self.site:
            raise ValueError(f"bad site id {self.site!r}")
        if self.start_ms <= 0:
            raise ValueError("start_ms must be positive")
        for source, spec in self.sensors.items():
            _check_in_range(Source(source), spec.baseline)
        get_profile(self.profile)

    @property
    def twin_id(self) -> str:
        return f"{self.site}/{self.node.hex}"

    @classmethod
    def from_dict(cls, d: Mapping) -> AgentConfig:
        sensors = d.get("sensors")
        if sensors is None:
            sensor_map = dict(DEFAULT_SENSORS)
        else:
            sensor_map = {Source(k): SensorSpec(**v) for k, v in sensors.items()}
        traffic = d.get("traffic", {})
        return cls(
            node=NodeId.parse(d["node"]),
            site=d["site"],
            sensors=sensor_map,
            traffic=None if traffic is None else TrafficSimConfig(**traffic),
            profile=d.get("profile", "mtd"),
            start_ms=int(d.get("start_ms", 1_700_000_000_000)),
            latency_jitter_ms=float(d.get("latency_jitter_ms", 0.0)),
        )

    def to_dict(self) -> dict:
        return {
            "node": self.node.hex,
            "site": self.site,
            "sensors": {
                s.value: {
                    "baseline": v.baseline,
                    "amplitude": v.amplitude,
                    "noise_stddev": v.noise_stddev,
                    "sample_period_ms": v.sample_period_ms,
                    "quality_model": v.quality_model,
                    "quality": v.quality,
                }
                for s, v in sorted(self.sensors.items())
            },
            "traffic": None
            if self.traffic is None
            else {
                "fps": self.traffic.fps,
                "mean_vehicles_per_frame": self.traffic.mean_vehicles_per_frame,
                "class_mix": list(self.traffic.class_mix),
                "track_persistence_frames": self.traffic.track_persistence_frames,
                "rng_seed": self.traffic.rng_seed,
            },
            "profile": self.profile,
            "start_ms": self.start_ms,
            "latency_jitter_ms": self.latency_jitter_ms,
        }


def load_agent_configs(path: str | Path) -> list[AgentConfig]:
    """Read one agent config object, or a JSON array of them."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, Mapping):
        data = [data]
    return [AgentConfig.from_dict(d) for d in data]


class EdgeAgent:
    def __init__(self, cfg: AgentConfig, seed: int | None = None):
        self.cfg = cfg
        self.profile = get_profile(cfg.profile)
        base = cfg.traffic.rng_seed if (seed is None and cfg.traffic) else (seed or 0)
        # Independent streams so adding a sensor doesn't perturb the traffic scene.
        self._traffic_rng = random.Random(f"{base}:traffic")
        self._detector_rng = random.Random(f"{base}:detector")
        self._sensor_rng = random.Random(f"{base}:sensors")
        self.traffic_state = TrafficState()
        self.counter = CounterState()
        self._packet_ids = itertools.count()
        self.site = cfg.site
        self.node = cfg.node
        prefix = f"tms/{cfg.site}/{cfg.node.hex}"
        self.inference_topic = f"{prefix}/inference"
        self._telemetry_topics = {s: f"{prefix}/telemetry/{s.value}" for s in Source}
        self._sources = sorted(Source(s) for s in cfg.sensors)
        self._next_sample = {s: cfg.start_ms for s in self._sources}
        self._cached_sensor: tuple[float, Source | None] | None = None
        self._node_bytes = cfg.node.bytes
        self._frame_index = 0
        self._next_frame_ms = self.frame_time(0) if cfg.traffic is not None else math.inf
        self.last_detection: DetectionResult | None = None

    def frame_time(self, k: int) -> int:
        return self.cfg.start_ms + math.floor(k * 1000.0 / self.cfg.traffic.fps + 1e-9)

    def next_due_ms(self) -> float:
        t_sensor = self._next_sensor()[0]
        return self._next_frame_ms if self._next_frame_ms < t_sensor else t_sensor

    def _process_frame(self, t_ms: int) -> bytes:
        frame = next_frame_truth(self.cfg.traffic, self.traffic_state, self._traffic_rng, t_ms)
        det = run_detector(self.profile, frame, self._detector_rng, self.cfg.latency_jitter_ms)
        update_counter(self.counter, frame, det)
        self.last_detection = det
        return pack_inference(
            next(self._packet_ids) & 0xFFFFFFFF,
            self._node_bytes,
            t_ms,
            frame.frame_seq,
            round(det.measured_latency_ms * 1000),
            det.per_class_counts,
            round(det.mean_confidence * 1000),
        )

    def _next_sensor(self) -> tuple[float, Source | None]:
        nxt = self._cached_sensor
        if nxt is None:
            t_sensor, source = math.inf, None
            for s in self._sources:
                t = self._next_sample[s]
                if t < t_sensor:
                    t_sensor, source = t, s
            nxt = self._cached_sensor = (t_sensor, source)
        return nxt

    def publish_tick(self, now_ms: int) -> list[tuple[str, bytes]]:
        """Everything due at or before ``now_ms``, in time order.

        Frames precede sensor samples due at the same millisecond; sensors go
        in source-name order.
        """
        out: list[tuple[str, bytes]] = []
        t_sensor, source = self._next_sensor()
        while True:
            t_frame = self._next_frame_ms
            if t_frame <= t_sensor and t_frame <= now_ms:
                out.append((self.inference_topic, self._process_frame(t_frame)))
                self._frame_index += 1
                self._next_frame_ms = self.frame_time(self._frame_index)
            elif t_sensor <= now_ms:
                spec = self.cfg.sensors[source]
                r = sample_telemetry(spec, source, t_sensor, self._sensor_rng, self.node)
                out.append((self._telemetry_topics[source], encode_telemetry_line(r).encode()))
                self._next_sample[source] = t_sensor + spec.sample_period_ms
                self._cached_sensor = None
                t_sensor, source = self._next_sensor()
            else:
                return out
