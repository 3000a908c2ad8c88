"""In-process publish/subscribe bus with MQTT topic-filter semantics.

No retained messages and no QoS levels: a message reaches each matching
subscription exactly once, in per-subscription FIFO order.
"""

from __future__ import annotations

import itertools
import queue
import threading
from collections.abc import Iterator
from dataclasses import dataclass

ALARM_TOPIC = "tms/$alarms"
DEADLETTER_TOPIC = "tms/$deadletter"


class InvalidFilter(ValueError):
    pass


class BusClosed(RuntimeError):
    pass


@dataclass(frozen=True)
class TopicFilter:
    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise InvalidFilter("empty filter")
        for i, seg in enumerate(segs):
            if not seg:
                raise InvalidFilter("empty level")
            if "/" in seg:
                raise InvalidFilter(f"level {seg!r} contains '/'")
            if seg == "#":
                if i != len(segs) - 1:
                    raise InvalidFilter("'#' must be the last level")
            elif "#" in seg or ("+" in seg and seg != "+"):
                raise InvalidFilter(f"wildcard must occupy a whole level: {seg!r}")

    @classmethod
    def parse(cls, text: str) -> TopicFilter:
        return cls(tuple(text.split("/")))

    def __str__(self) -> str:
        return "/".join(self.segments)

    def matches(self, topic: str) -> bool:
        return topic_matches(self, topic)


def topic_matches(filter: TopicFilter | str, topic: str) -> bool:
    if isinstance(filter, str):
        filter = TopicFilter.parse(filter)
    levels = topic.split("/")
    segs = filter.segments
    # Wildcards in the first level never match '$' system topics.
    if levels[0].startswith("$") and segs[0] in ("+", "#"):
        return False
    for i, seg in enumerate(segs):
        if seg == "#":
            return True
        if i >= len(levels):
            return False
        if seg != "+" and seg != levels[i]:
            return False
    return len(levels) == len(segs)


_END = object()


class Subscription:
    """Handle returned by :meth:`Bus.subscribe`; iterate or poll for (topic, payload)."""

    def __init__(self, bus: Bus, filter: TopicFilter, sub_id: int):
        self.bus = bus
        self.filter = filter
        self.id = sub_id
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self.active = True
        self._verdicts: dict[str, bool] = {}

    def accepts(self, topic: str) -> bool:
        v = self._verdicts.get(topic)
        if v is None:
            v = topic_matches(self.filter, topic)
            if len(self._verdicts) < 4096:
                self._verdicts[topic] = v
        return v

    def _deliver(self, topic: str, payload: bytes) -> None:
        self._queue.put((topic, payload))

    def get(self, timeout: float | None = None) -> tuple[str, bytes] | None:
        """Next message, or None on timeout or once the subscription has ended."""
        try:
            item = self._queue.get(timeout=timeout) if timeout != 0 else self._queue.get_nowait()
        except queue.Empty:
            return None
        if item is _END:
            self._queue.put(_END)
            return None
        return item

    def drain(self) -> list[tuple[str, bytes]]:
        out = []
        q = self._queue
        while not q.empty():
            try:
                item = q.get_nowait()
            except queue.Empty:
                break
            if item is _END:
                self._queue.put(_END)
                return out
            out.append(item)
        return out

    def __iter__(self) -> Iterator[tuple[str, bytes]]:
        while True:
            item = self._queue.get()
            if item is _END:
                self._queue.put(_END)
                return
            yield item

    def unsubscribe(self) -> None:
        self.bus.unsubscribe(self)

    def _end(self) -> None:
        self.active = False
        self._queue.put(_END)


class Bus:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._subs: dict[int, Subscription] = {}
        self._ids = itertools.count(1)
        self._closed = False
        self.published = 0

    def subscribe(self, filter: TopicFilter | str) -> Subscription:
        if isinstance(filter, str):
            filter = TopicFilter.parse(filter)
        with self._lock:
            if self._closed:
                raise BusClosed("bus is shut down")
            sub = Subscription(self, filter, next(self._ids))
            self._subs[sub.id] = sub
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if self._subs.pop(sub.id, None) is not None:
                sub._end()

    def publish(self, topic: str, payload: bytes) -> int:
        """Deliver to every matching subscription; returns the delivery count."""
        if "+" in topic or "#" in topic or not topic:
            raise ValueError(f"publish topic must be concrete: {topic!r}")
        # Matching and enqueueing under one lock keeps per-publisher order
        # consistent across all subscriptions.
        with self._lock:
            if self._closed:
                raise BusClosed("bus is shut down")
            self.published += 1
            n = 0
            for sub in self._subs.values():
                if sub.accepts(topic):
                    sub._deliver(topic, payload)
                    n += 1
            return n

    def close(self) -> None:
        with self._lock:
            self._closed = True
            subs = list(self._subs.values())
            self._subs.clear()
        for sub in subs:
            sub._end()

    @property
    def closed(self) -> bool:
        return self._closed
