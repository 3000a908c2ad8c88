"""Shared domain vocabulary: node identifiers, readings, detector profiles, frames."""

from __future__ import annotations

import math
import uuid
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import NamedTuple

VEHICLE_CLASSES = ("car", "bus", "truck", "motorcycle", "bicycle", "other")
MAX_CLASSES = len(VEHICLE_CLASSES)

DAY_MS = 86_400_000


class InvalidReading(ValueError):
    """A TelemetryReading violates one of its invariants."""


class Source(str, Enum):
    TEMPERATURE_C = "temperature_c"
    HUMIDITY_PCT = "humidity_pct"
    PRESSURE_HPA = "pressure_hpa"
    CO2_PPM = "co2_ppm"
    NO2_PPB = "no2_ppb"
    PM25_UGM3 = "pm25_ugm3"
    NOISE_DB = "noise_db"

    @property
    def label(self) -> str:
        # "co2_ppm" -> "co2"
        return self.value.rsplit("_", 1)[0]

    def __str__(self) -> str:
        return self.value


# Inclusive physical bounds per source. Used both for validation and for
# clamping simulated values.
SOURCE_RANGES: dict[Source, tuple[float, float]] = {
    Source.TEMPERATURE_C: (-273.15, math.inf),
    Source.HUMIDITY_PCT: (0.0, 100.0),
    Source.PRESSURE_HPA: (0.0, math.inf),
    Source.CO2_PPM: (0.0, math.inf),
    Source.NO2_PPB: (0.0, math.inf),
    Source.PM25_UGM3: (0.0, math.inf),
    Source.NOISE_DB: (0.0, math.inf),
}


@dataclass(frozen=True, order=True)
class NodeId:
    """128-bit identifier of one edge device. Never the nil UUID."""

    uuid: uuid.UUID

    def __post_init__(self) -> None:
        if not isinstance(self.uuid, uuid.UUID):
            raise TypeError("NodeId wraps a uuid.UUID")
        if self.uuid.int == 0:
            raise ValueError("nil node id")

    @classmethod
    def parse(cls, text: str) -> NodeId:
        return cls(uuid.UUID(text.strip()))

    @classmethod
    def from_bytes(cls, raw: bytes) -> NodeId:
        return _node_from_bytes(bytes(raw))

    @classmethod
    def from_int(cls, n: int) -> NodeId:
        return cls(uuid.UUID(int=n))

    @classmethod
    def random(cls) -> NodeId:
        return cls(uuid.uuid4())

    @property
    def bytes(self) -> bytes:
        return self.uuid.bytes

    @property
    def hex(self) -> str:
        return self.uuid.hex

    def __str__(self) -> str:
        return self.uuid.hex


@lru_cache(maxsize=1024)
def _node_from_bytes(raw: bytes) -> NodeId:
    return NodeId(uuid.UUID(bytes=raw))


def validate_reading(r: TelemetryReading) -> None:
    """Raise InvalidReading naming the first violated invariant of ``r``."""
    if not math.isfinite(r.value):
        raise InvalidReading("non-finite value")
    if not (math.isfinite(r.quality) and 0.0 <= r.quality <= 1.0):
        raise InvalidReading("quality out of range")
    if r.timestamp_ms <= 0:
        raise InvalidReading("non-positive timestamp")
    lo, hi = SOURCE_RANGES[r.source]
    if not lo <= r.value <= hi:
        raise InvalidReading(f"{r.source.label} out of range")


@dataclass(frozen=True)
class TelemetryReading:
    node: NodeId
    source: Source
    value: float
    timestamp_ms: int
    quality: float = 1.0

    def __post_init__(self) -> None:
        if not isinstance(self.source, Source):
            object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "quality", float(self.quality))
        validate_reading(self)


@dataclass(frozen=True)
class DetectorProfile:
    name: str
    inference_latency_ms: float
    map_score: float
    classes: tuple[str, ...] = VEHICLE_CLASSES

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        if not (self.inference_latency_ms > 0 and math.isfinite(self.inference_latency_ms)):
            raise ValueError("inference latency must be positive")
        if not 0.0 <= self.map_score <= 1.0:
            raise ValueError("map score must lie in [0, 1]")
        if not 1 <= len(self.classes) <= MAX_CLASSES:
            raise ValueError(f"between 1 and {MAX_CLASSES} classes required")


class TrackedObject(NamedTuple):
    track_id: int
    class_index: int


@dataclass(frozen=True)
class FrameTruth:
    frame_seq: int
    objects: tuple[TrackedObject, ...]
    timestamp_ms: int

    def __post_init__(self) -> None:
        objects = self.objects
        if type(objects) is not tuple:
            object.__setattr__(self, "objects", objects := tuple(objects))
        if self.frame_seq < 0:
            raise ValueError("frame_seq must be non-negative")
        if not objects:
            return
        if len({o[0] for o in objects}) != len(objects):
            raise ValueError("duplicate track id in frame")
        classes = [o[1] for o in objects]
        if min(classes) < 0 or max(classes) >= MAX_CLASSES:
            raise ValueError("class index out of range")


@dataclass(frozen=True)
class DetectionResult:
    frame_seq: int
    per_class_counts: tuple[int, ...]
    total: int
    mean_confidence: float
    measured_latency_ms: float
    # Tracks the simulated detector actually saw; needed by the counter.
    detected_tracks: tuple[TrackedObject, ...] = field(default=())

    def __post_init__(self) -> None:
        counts = self.per_class_counts
        if type(counts) is not tuple:
            object.__setattr__(self, "per_class_counts", counts := tuple(counts))
        if type(self.detected_tracks) is not tuple:
            object.__setattr__(self, "detected_tracks", tuple(self.detected_tracks))
        if len(counts) != MAX_CLASSES:
            raise ValueError(f"exactly {MAX_CLASSES} class counters required")
        if min(counts) < 0:
            raise ValueError("negative class count")
        if self.total != sum(counts):
            raise ValueError("total does not equal sum of class counts")
        if not 0.0 <= self.mean_confidence <= 1.0:
            raise ValueError("mean confidence out of range")
        if not self.measured_latency_ms > 0:
            raise ValueError("latency must be positive")
