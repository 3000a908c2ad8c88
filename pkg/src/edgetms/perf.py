"""Closed-form edge-vs-cloud deployment model.

Pure serialization arithmetic: no queueing, loss or TCP dynamics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

from .codec import MESSAGE_SIZE
from .core import DetectorProfile
from .profiles import get_profile

SECONDS_PER_DAY = 86_400

DEFAULT_FPS = 20.0
DEFAULT_FRAME_BYTES = 1_936_000
DEFAULT_BANDWIDTH_BPS = 450e6
# Protocol overhead multiplier; 1.936 MB over 450 Mbit/s then takes ~43 ms.
DEFAULT_OVERHEAD = 1.25
# Calibrated, not measured: chosen so the default comparison shows a 40 %
# end-to-end latency reduction for the edge deployment.
DEFAULT_CLOUD_INFERENCE_MS = 73.7

# Published reference figures the report is checked against.
REFERENCE_FRAME_NETWORK_MS = 43.0
REFERENCE_FRAMES_PER_DAY = 1_729_000
REFERENCE_CLOUD_VOLUME = 3.34e12
REFERENCE_EDGE_VOLUME_BITS = 0.872e9
REFERENCE_REDUCTION_FACTOR = 10_000.0
REFERENCE_LATENCY_REDUCTION = 0.40

Mode = Literal["edge", "cloud"]


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float = DEFAULT_BANDWIDTH_BPS
    propagation_ms: float = 0.0
    overhead_factor: float = DEFAULT_OVERHEAD

    def __post_init__(self) -> None:
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth must be positive")
        if not self.propagation_ms >= 0:
            raise ValueError("propagation delay must be non-negative")
        if not self.overhead_factor >= 1:
            raise ValueError("overhead factor must be >= 1")


@dataclass(frozen=True)
class DeploymentConfig:
    mode: Mode
    fps: float = DEFAULT_FPS
    frame_bytes: int = DEFAULT_FRAME_BYTES
    message_bytes: int = MESSAGE_SIZE
    edge_profile: DetectorProfile = field(default_factory=lambda: get_profile("mtd"))
    cloud_inference_ms: float = DEFAULT_CLOUD_INFERENCE_MS
    uplink: LinkModel = field(default_factory=LinkModel)

    def __post_init__(self) -> None:
        if self.mode not in ("edge", "cloud"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if not self.frame_bytes > self.message_bytes >= 1:
            raise ValueError("require frame_bytes > message_bytes >= 1")
        if not self.cloud_inference_ms > 0:
            raise ValueError("cloud inference time must be positive")

    @property
    def unit_bytes(self) -> int:
        """Bytes crossing the uplink per frame in this mode."""
        return self.message_bytes if self.mode == "edge" else self.frame_bytes


def reference_defaults() -> tuple[DeploymentConfig, DeploymentConfig]:
    """(edge, cloud) configurations matching the published experiment."""
    return DeploymentConfig("edge"), DeploymentConfig("cloud")


def transfer_latency_ms(payload_bytes: int, link: LinkModel) -> float:
    if payload_bytes <= 0:
        raise ValueError("payload must be at least one byte")
    serialization_ms = payload_bytes * 8 / link.bandwidth_bps * 1000.0
    return serialization_ms * link.overhead_factor + link.propagation_ms


def frames_per_day(fps: float) -> int:
    if not fps > 0:
        raise ValueError("fps must be positive")
    return math.floor(fps * SECONDS_PER_DAY)


def bytes_per_day(unit_bytes: int, fps: float) -> int:
    if unit_bytes <= 0:
        raise ValueError("unit size must be positive")
    return unit_bytes * frames_per_day(fps)


def reduction_factor(cfg_cloud: DeploymentConfig, cfg_edge: DeploymentConfig) -> float:
    if cfg_cloud.fps != cfg_edge.fps:
        raise ValueError("configurations must share the same frame rate")
    return bytes_per_day(cfg_cloud.unit_bytes, cfg_cloud.fps) / bytes_per_day(
        cfg_edge.unit_bytes, cfg_edge.fps
    )


def network_ms(cfg: DeploymentConfig) -> float:
    return transfer_latency_ms(cfg.unit_bytes, cfg.uplink)


def end_to_end_ms(cfg: DeploymentConfig) -> float:
    if cfg.mode == "edge":
        return cfg.edge_profile.inference_latency_ms + network_ms(cfg)
    return network_ms(cfg) + cfg.cloud_inference_ms


@dataclass(frozen=True)
class ModeFigures:
    mode: str
    frames_per_day: int
    bytes_per_day: int
    per_frame_network_ms: float
    end_to_end_ms: float


@dataclass(frozen=True)
class ReferenceDelta:
    quantity: str
    computed: float
    reference_value: float
    relative_error: float
    note: str = ""


def _delta(quantity: str, computed: float, reference: float, note: str = "") -> ReferenceDelta:
    return ReferenceDelta(quantity, computed, reference, (computed - reference) / reference, note)


@dataclass(frozen=True)
class ComparisonReport:
    edge: ModeFigures
    cloud: ModeFigures
    reduction_factor: float
    latency_reduction: float
    reference_deltas: tuple[ReferenceDelta, ...]
    measured_edge_bytes_per_day: float | None = None

    @property
    def measured_relative_error(self) -> float | None:
        if self.measured_edge_bytes_per_day is None:
            return None
        return (self.measured_edge_bytes_per_day - self.edge.bytes_per_day) / self.edge.bytes_per_day

    def delta(self, quantity: str) -> ReferenceDelta:
        for d in self.reference_deltas:
            if d.quantity == quantity:
                return d
        raise KeyError(quantity)

    def with_measurement(self, edge_bytes_per_day: float) -> ComparisonReport:
        return replace(self, measured_edge_bytes_per_day=edge_bytes_per_day)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reference_deltas"] = [asdict(p) for p in self.reference_deltas]
        d["measured_relative_error"] = self.measured_relative_error
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_table(self) -> str:
        rows = [
            ("quantity", "edge", "cloud"),
            ("frames/day", f"{self.edge.frames_per_day:,}", f"{self.cloud.frames_per_day:,}"),
            ("bytes/day", f"{self.edge.bytes_per_day:,}", f"{self.cloud.bytes_per_day:,}"),
            (
                "network ms/frame",
                f"{self.edge.per_frame_network_ms:.4f}",
                f"{self.cloud.per_frame_network_ms:.2f}",
            ),
            ("end-to-end ms", f"{self.edge.end_to_end_ms:.1f}", f"{self.cloud.end_to_end_ms:.1f}"),
        ]
        lines = [f"{a:<18}{b:>22}{c:>22}" for a, b, c in rows]
        lines.insert(1, "-" * 62)
        lines.append("")
        lines.append(f"reduction factor    {self.reduction_factor:,.1f}")
        lines.append(f"latency reduction   {self.latency_reduction * 100:.1f}%")
        if self.measured_edge_bytes_per_day is not None:
            lines.append(
                f"measured edge B/day {self.measured_edge_bytes_per_day:,.0f}"
                f" ({self.measured_relative_error * 100:+.4f}%)"
            )
        lines.append("")
        lines.append(f"{'reference figure':<26}{'computed':>18}{'published':>18}{'rel.err':>10}  note")
        lines.append("-" * 90)
        for p in self.reference_deltas:
            lines.append(
                f"{p.quantity:<26}{p.computed:>18,.6g}{p.reference_value:>18,.6g}"
                f"{p.relative_error * 100:>9.3f}%  {p.note}"
            )
        return "\n".join(lines) + "\n"


def _figures(cfg: DeploymentConfig) -> ModeFigures:
    return ModeFigures(
        mode=cfg.mode,
        frames_per_day=frames_per_day(cfg.fps),
        bytes_per_day=bytes_per_day(cfg.unit_bytes, cfg.fps),
        per_frame_network_ms=network_ms(cfg),
        end_to_end_ms=end_to_end_ms(cfg),
    )


def compare(cfg_edge: DeploymentConfig, cfg_cloud: DeploymentConfig) -> ComparisonReport:
    edge, cloud = _figures(cfg_edge), _figures(cfg_cloud)
    factor = reduction_factor(cfg_cloud, cfg_edge)
    latency_reduction = (cloud.end_to_end_ms - edge.end_to_end_ms) / cloud.end_to_end_ms
    deltas = (
        _delta(
            "frame_network_ms",
            cloud.per_frame_network_ms,
            REFERENCE_FRAME_NETWORK_MS,
            "published as an upper bound; overhead factor calibrated",
        ),
        _delta("frames_per_day", cloud.frames_per_day, REFERENCE_FRAMES_PER_DAY, "exact 86,400 s/day used"),
        _delta(
            "cloud_volume_per_day",
            cloud.bytes_per_day,
            REFERENCE_CLOUD_VOLUME,
            "published unit letter is bits; magnitude matches bytes",
        ),
        _delta(
            "edge_bits_per_day",
            edge.bytes_per_day * 8,
            REFERENCE_EDGE_VOLUME_BITS,
            "published figure implies ~63 B/message, not 67 B",
        ),
        _delta("reduction_factor", factor, REFERENCE_REDUCTION_FACTOR, "published as a lower bound"),
        _delta(
            "latency_reduction",
            latency_reduction,
            REFERENCE_LATENCY_REDUCTION,
            "cloud inference time back-solved; calibration only",
        ),
    )
    return ComparisonReport(edge, cloud, factor, latency_reduction, deltas)
