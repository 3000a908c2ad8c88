"""Built-in detector profiles.

Latencies follow the vendor Edge TPU benchmark. Only the MTD model's
mAP is known (0.858); the other mAP values are placeholders and are
flagged in ``PLACEHOLDER_MAP``.
"""

from __future__ import annotations

from .core import DetectorProfile

PROFILES: dict[str, DetectorProfile] = {
    p.name: p
    for p in (
        DetectorProfile("ssd_mobilenet_v1", 12.6, 0.55),
        # latency bounded by "under 30 ms" for the pre-trained models
        DetectorProfile("ssd_mobilenet_v2", 25.0, 0.58),
        DetectorProfile("ssdlite_mobiledet", 28.0, 0.62),
        DetectorProfile("mtd", 70.0, 0.858),
        DetectorProfile("ti", 70.0, 0.80),
    )
}

PLACEHOLDER_MAP = frozenset({"ssd_mobilenet_v1", "ssd_mobilenet_v2", "ssdlite_mobiledet", "ti"})


def get_profile(name: str) -> DetectorProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown detector profile {name!r}; known: {', '.join(PROFILES)}") from None
