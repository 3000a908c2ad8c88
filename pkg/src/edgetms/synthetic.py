"""Synthetic sensing: traffic-level estimation from environmental signatures, and
z-score anomaly detection on telemetry series."""

from __future__ import annotations

import math
import statistics
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .core import DAY_MS
from .twins import SignatureQuery, SignatureRecord, TwinStore

TRAFFIC_SOURCES = ("noise_db", "co2_ppm", "no2_ppb", "pm25_ugm3")
DEFAULT_WEIGHTS = {"noise_db": 0.4, "co2_ppm": 0.2, "no2_ppb": 0.2, "pm25_ugm3": 0.2}
DEFAULT_WINDOW_MS = DAY_MS
MIN_ANOMALY_SERIES = 10


class EmptyWindow(ValueError):
    pass


class NoUsableSignatures(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class NormalizationWindow:
    """Sliding min/max over the last ``window_ms`` of one source.

    Monotone deques give amortised O(1) updates.
    """

    def __init__(self, window_ms: int = DEFAULT_WINDOW_MS):
        if window_ms <= 0:
            raise ValueError("window must be positive")
        self.window_ms = window_ms
        self._samples: deque[tuple[int, float]] = deque()
        self._mins: deque[tuple[int, float]] = deque()
        self._maxs: deque[tuple[int, float]] = deque()

    def add(self, t_ms: int, value: float) -> None:
        self._samples.append((t_ms, value))
        while self._mins and self._mins[-1][1] >= value:
            self._mins.pop()
        self._mins.append((t_ms, value))
        while self._maxs and self._maxs[-1][1] <= value:
            self._maxs.pop()
        self._maxs.append((t_ms, value))
        self.expire(t_ms)

    def expire(self, now_ms: int) -> None:
        cutoff = now_ms - self.window_ms
        for dq in (self._samples, self._mins, self._maxs):
            while dq and dq[0][0] <= cutoff:
                dq.popleft()

    @property
    def count(self) -> int:
        return len(self._samples)

    @property
    def min(self) -> float:
        if not self._mins:
            raise EmptyWindow("empty normalization window")
        return self._mins[0][1]

    @property
    def max(self) -> float:
        if not self._maxs:
            raise EmptyWindow("empty normalization window")
        return self._maxs[0][1]


@dataclass(frozen=True)
class WindowStats:
    min: float
    max: float
    count: int

    @classmethod
    def of(cls, w: NormalizationWindow) -> WindowStats:
        return cls(w.min, w.max, w.count) if w.count else cls(math.nan, math.nan, 0)


def normalize(value: float, window: NormalizationWindow | WindowStats) -> float:
    if window.count == 0:
        raise EmptyWindow("empty normalization window")
    lo, hi = window.min, window.max
    if hi == lo:
        return 0.5
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


@dataclass(frozen=True)
class TrafficEstimate:
    twin_id: str
    level: float
    contributing: tuple[int, ...]
    computed_ms: int


def _check_weights(weights: Mapping[str, float]) -> None:
    if any(w < 0 or not math.isfinite(w) for w in weights.values()):
        raise ValueError("weights must be non-negative")
    if abs(sum(weights.values()) - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")


def estimate_traffic_level(
    twin_id: str,
    selected: Sequence[SignatureRecord],
    windows: Mapping[str, NormalizationWindow | WindowStats],
    weights: Mapping[str, float] = DEFAULT_WEIGHTS,
    computed_ms: int = 0,
) -> TrafficEstimate:
    """Weighted blend of normalized latest values per source.

    Sources with no selected record (or no window) are dropped and the
    remaining weights renormalized.
    """
    _check_weights(weights)
    latest: dict[str, SignatureRecord] = {}
    for rec in selected:
        if rec.source not in weights:
            continue
        cur = latest.get(rec.source)
        if cur is None or (rec.timestamp_ms, rec.sequence) > (cur.timestamp_ms, cur.sequence):
            latest[rec.source] = rec
    used = {
        s: r for s, r in latest.items() if weights[s] > 0 and s in windows and windows[s].count > 0
    }
    total_w = sum(weights[s] for s in used)
    if not used or total_w <= 0:
        raise NoUsableSignatures(f"no usable signatures for {twin_id}")
    level = sum(weights[s] * normalize(r.value, windows[s]) for s, r in used.items()) / total_w
    level = min(1.0, max(0.0, level))
    return TrafficEstimate(
        twin_id, level, tuple(sorted(r.sequence for r in used.values())), computed_ms
    )


def select_and_estimate(
    store: TwinStore,
    twin_id: str,
    windows: Mapping[str, NormalizationWindow],
    now_ms: int,
    weights: Mapping[str, float] = DEFAULT_WEIGHTS,
    window_ms: int = DEFAULT_WINDOW_MS,
    min_quality: float = 0.0,
) -> TrafficEstimate:
    """Query the signature repository for the freshest usable value of each
    traffic-related source, then estimate."""
    selected: list[SignatureRecord] = []
    for source in weights:
        q = SignatureQuery(
            twin_id,
            from_ms=now_ms - window_ms,
            to_ms=now_ms,
            sources=frozenset({source}),
            min_quality=min_quality,
            max_results=1,
            recency_weight=1.0,
        )
        selected.extend(store.select_signatures(q))
    return estimate_traffic_level(twin_id, selected, windows, weights, now_ms)


@dataclass(frozen=True)
class AnomalyResult:
    flag: bool
    z: float


def detect_anomaly(series: Sequence[float], k: float) -> AnomalyResult:
    """Compare the last value against the mean/stddev of the values before it."""
    if len(series) < MIN_ANOMALY_SERIES:
        raise InsufficientData("insufficient data")
    *prior, latest = series
    mean = statistics.fmean(prior)
    sd = statistics.stdev(prior) if any(x != prior[0] for x in prior) else 0.0
    if sd == 0.0:
        # constant prior, or a spread that underflows
        if latest == mean:
            return AnomalyResult(False, 0.0)
        return AnomalyResult(True, math.copysign(math.inf, latest - mean))
    z = (latest - mean) / sd
    return AnomalyResult(abs(z) >= k, z)
