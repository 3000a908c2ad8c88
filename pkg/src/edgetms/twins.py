"""Digital-twin document store and per-twin signature repository.

Twins persist as one JSON file per twin under ``<root>/twins/<site>/<node>.json``.
Signatures persist as append-only line logs under
``<root>/signatures/<site>/<node>.log``, one record per line::

    <sequence> <source>,node=<node> value=<v>,quality=<q> <timestamp_ms>

With ``root=None`` everything stays in memory.
"""

from __future__ import annotations

import copy
import functools
import heapq
import json
import logging
import math
import os
import re
import threading
import time
from array import array
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .codec import format_decimal, split_line

log = logging.getLogger(__name__)

MAX_PATH_DEPTH = 8
_ID_LEVEL = re.compile(r"^[A-Za-z0-9_.\-]+$")


class TwinError(Exception):
    status = 400
    code = "bad_request"


class TwinNotFound(TwinError):
    status = 404
    code = "not_found"


class InvalidPath(TwinError):
    code = "invalid_path"


class RevisionConflict(TwinError):
    status = 409
    code = "conflict"


def check_twin_id(twin_id: str) -> str:
    levels = twin_id.split("/")
    if len(levels) != 2 or not all(_ID_LEVEL.match(x) for x in levels):
        raise TwinError(f"twin id must look like <site>/<node>: {twin_id!r}")
    return twin_id


@functools.lru_cache(maxsize=4096)
def split_path(path: str) -> tuple[str, ...]:
    parts = tuple(path.strip("/").split("/"))
    if not all(parts):
        raise InvalidPath(f"malformed property path {path!r}")
    if len(parts) > MAX_PATH_DEPTH:
        raise InvalidPath(f"path depth {len(parts)} exceeds {MAX_PATH_DEPTH}")
    if parts[0] == "attributes":
        if len(parts) < 2:
            raise InvalidPath("attribute path needs a key")
    elif parts[0] == "features":
        if len(parts) < 4 or parts[2] != "properties":
            raise InvalidPath("feature paths look like features/<name>/properties/<key>...")
    else:
        raise InvalidPath("path must start with 'attributes' or 'features'")
    return parts


_MISSING = object()
_PLAIN = {int, str, bool, type(None)}


def _is_scalar(v: object) -> bool:
    t = type(v)
    if t is float:
        return math.isfinite(v)
    return v is None or t is int or t is str or t is bool or isinstance(v, (str, int, float)) and _is_finite(v)


def _is_finite(v: object) -> bool:
    return not isinstance(v, float) or math.isfinite(v)


def _check_tree(node: object, depth: int, where: str) -> None:
    if isinstance(node, Mapping):
        if depth > MAX_PATH_DEPTH:
            raise InvalidPath(f"{where}: nesting exceeds depth {MAX_PATH_DEPTH}")
        for k, v in node.items():
            if not isinstance(k, str) or not k or "/" in k:
                raise InvalidPath(f"{where}: bad key {k!r}")
            _check_tree(v, depth + 1, f"{where}/{k}")
    elif not _is_scalar(node):
        raise InvalidPath(f"{where}: leaves must be scalars")


@dataclass
class TwinDocument:
    twin_id: str
    attributes: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    revision: int = 0
    modified_ms: int = 0

    def to_dict(self) -> dict:
        return {
            "twin_id": self.twin_id,
            "attributes": self.attributes,
            "features": self.features,
            "revision": self.revision,
            "modified_ms": self.modified_ms,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TwinDocument:
        return cls(
            twin_id=d["twin_id"],
            attributes=dict(d.get("attributes") or {}),
            features=dict(d.get("features") or {}),
            revision=int(d.get("revision", 0)),
            modified_ms=int(d.get("modified_ms", 0)),
        )

    def get(self, path: str) -> object:
        node: object = {"attributes": self.attributes, "features": self.features}
        for part in split_path(path):
            if not isinstance(node, Mapping) or part not in node:
                raise KeyError(path)
            node = node[part]
        return node

    def validate(self) -> None:
        check_twin_id(self.twin_id)
        _check_tree(self.attributes, 2, "attributes")
        if not isinstance(self.features, Mapping):
            raise InvalidPath("features must be a mapping")
        for name, feat in self.features.items():
            if not isinstance(feat, Mapping) or set(feat) - {"properties"}:
                raise InvalidPath(f"feature {name!r} must be {{'properties': {{...}}}}")
            _check_tree(feat.get("properties", {}), 4, f"features/{name}/properties")


@dataclass(frozen=True, slots=True)
class SignatureRecord:
    twin_id: str
    source: str
    value: float
    timestamp_ms: int
    quality: float
    sequence: int = 0


@dataclass(frozen=True)
class SignatureQuery:
    twin_id: str
    from_ms: int
    to_ms: int
    sources: frozenset[str] | None = None
    min_quality: float = 0.0
    max_results: int = 100
    recency_weight: float = 0.5
    reference_ms: int | None = None

    def __post_init__(self) -> None:
        if self.sources is not None:
            object.__setattr__(self, "sources", frozenset(str(s) for s in self.sources))
        if self.from_ms > self.to_ms:
            raise ValueError("from_ms must not exceed to_ms")
        if self.max_results < 1:
            raise ValueError("max_results must be >= 1")
        if not 0.0 <= self.min_quality <= 1.0:
            raise ValueError("min_quality must lie in [0, 1]")
        if not 0.0 <= self.recency_weight <= 1.0:
            raise ValueError("recency weight must lie in [0, 1]")

    @property
    def reference(self) -> int:
        return self.to_ms if self.reference_ms is None else self.reference_ms


def recency(timestamp_ms: int, from_ms: int, reference_ms: int) -> float:
    span = reference_ms - from_ms
    if span <= 0:
        return 1.0 if timestamp_ms >= reference_ms else 0.0
    r = 1.0 - (reference_ms - timestamp_ms) / span
    return min(1.0, max(0.0, r))


def signature_score(rec: SignatureRecord, q: SignatureQuery) -> float:
    w = q.recency_weight
    return w * recency(rec.timestamp_ms, q.from_ms, q.reference) + (1.0 - w) * rec.quality


class _Column:
    """Column-oriented storage of one (twin, source) series."""

    __slots__ = ("seq", "ts", "value", "quality")

    def __init__(self) -> None:
        self.seq = array("q")
        self.ts = array("q")
        self.value = array("d")
        self.quality = array("d")

    def append(self, seq: int, ts: int, value: float, quality: float) -> None:
        self.seq.append(seq)
        self.ts.append(ts)
        self.value.append(value)
        self.quality.append(quality)


class _Twin:
    def __init__(self, twin_id: str):
        self.twin_id = twin_id
        self.doc: TwinDocument | None = None
        self.lock = threading.RLock()
        self.columns: dict[str, _Column] = {}
        self.last_seq = 0
        self.log_fh = None


class TwinStore:
    """Thread-safe twin store. Writes serialize per twin; reads never block other twins."""

    def __init__(self, root: str | os.PathLike | None = None, *, fsync: bool = False, clock=None):
        self.root = Path(root) if root is not None else None
        self.fsync = fsync
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._lock = threading.Lock()
        self._twins: dict[str, _Twin] = {}
        if self.root is not None:
            self._load()

    # -- internals ---------------------------------------------------------

    def _slot(self, twin_id: str, create: bool = True) -> _Twin | None:
        t = self._twins.get(twin_id)
        if t is None and create:
            check_twin_id(twin_id)
            with self._lock:
                t = self._twins.setdefault(twin_id, _Twin(twin_id))
        return t

    def _twin_path(self, twin_id: str) -> Path:
        site, node = twin_id.split("/")
        return self.root / "twins" / site / f"{node}.json"

    def _log_path(self, twin_id: str) -> Path:
        site, node = twin_id.split("/")
        return self.root / "signatures" / site / f"{node}.log"

    def _persist(self, doc: TwinDocument) -> None:
        if self.root is None:
            return
        path = self._twin_path(doc.twin_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc.to_dict(), fh, sort_keys=True)
            if self.fsync:
                fh.flush()
                os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _load(self) -> None:
        for path in sorted((self.root / "twins").glob("*/*.json")):
            with open(path, encoding="utf-8") as fh:
                doc = TwinDocument.from_dict(json.load(fh))
            self._slot(doc.twin_id).doc = doc
        for path in sorted((self.root / "signatures").glob("*/*.log")):
            twin_id = f"{path.parent.name}/{path.stem}"
            slot = self._slot(twin_id)
            self._scan_log(slot, path)

    def _scan_log(self, slot: _Twin, path: Path) -> None:
        good_bytes = 0
        with open(path, "rb") as fh:
            for raw in fh:
                if not raw.endswith(b"\n"):
                    break  # torn tail from an interrupted append
                seq_text, _, rest = raw.decode("utf-8").rstrip("\n").partition(" ")
                source, _node, value, quality, ts = split_line(rest)
                seq = int(seq_text)
                if seq != slot.last_seq + 1:
                    raise ValueError(f"{path}: sequence gap at {seq}")
                slot.columns.setdefault(source, _Column()).append(seq, ts, value, quality)
                slot.last_seq = seq
                good_bytes += len(raw)
        if good_bytes != path.stat().st_size:
            log.warning("truncating torn record at end of %s", path)
            with open(path, "r+b") as fh:
                fh.truncate(good_bytes)

    def _write(self, slot: _Twin, doc: TwinDocument, now_ms: int | None) -> int:
        doc.revision = (slot.doc.revision if slot.doc else 0) + 1
        doc.modified_ms = self._clock() if now_ms is None else now_ms
        self._persist(doc)
        slot.doc = doc
        return doc.revision

    # -- documents ---------------------------------------------------------

    def upsert_twin(
        self,
        doc: TwinDocument | Mapping,
        *,
        expected_revision: int | None = None,
        now_ms: int | None = None,
    ) -> int:
        """Create or replace a twin; returns the new revision."""
        if isinstance(doc, Mapping):
            doc = TwinDocument.from_dict(doc)
        new = TwinDocument(doc.twin_id, copy.deepcopy(doc.attributes), copy.deepcopy(doc.features))
        new.validate()
        slot = self._slot(new.twin_id)
        with slot.lock:
            current = slot.doc.revision if slot.doc else 0
            if expected_revision is not None and expected_revision != current:
                raise RevisionConflict(f"revision is {current}, expected {expected_revision}")
            return self._write(slot, new, now_ms)

    def get_twin(self, twin_id: str) -> TwinDocument:
        slot = self._slot(twin_id, create=False)
        if slot is None or slot.doc is None:
            raise TwinNotFound(twin_id)
        with slot.lock:
            return copy.deepcopy(slot.doc)

    def has_twin(self, twin_id: str) -> bool:
        slot = self._twins.get(twin_id)
        return slot is not None and slot.doc is not None

    def list_twins(self) -> list[str]:
        return sorted(k for k, v in list(self._twins.items()) if v.doc is not None)

    def set_property(self, twin_id: str, path: str, value: object, *, now_ms: int | None = None) -> int:
        return self.set_properties(twin_id, {path: value}, now_ms=now_ms)

    def set_properties(
        self, twin_id: str, values: Mapping[str, object], *, now_ms: int | None = None
    ) -> int:
        """Set several leaves in one write (one revision step)."""
        # Group leaves by parent container: one walk per container.
        groups: dict[tuple[str, ...], list[tuple[str, object]]] = {}
        for p, v in values.items():
            parts = split_path(p)
            if not _is_scalar(v):
                raise InvalidPath(f"{p}: value must be a scalar")
            groups.setdefault(parts[:-1], []).append((parts[-1], v))
        slot = self._slot(twin_id, create=False)
        if slot is None or slot.doc is None:
            raise TwinNotFound(twin_id)
        with slot.lock:
            doc = slot.doc
            root = {"attributes": doc.attributes, "features": doc.features}
            # Check everything before touching the document so a rejected
            # write leaves it unchanged.
            for parent, leaves in groups.items():
                node = root
                for part in parent:
                    node = node.get(part, _MISSING)
                    if node is _MISSING:
                        break
                    if type(node) is not dict:
                        raise InvalidPath(f"{'/'.join(parent)}: path runs through a leaf")
                else:
                    for key, _ in leaves:
                        if type(node.get(key)) is dict:
                            raise InvalidPath(f"{'/'.join(parent)}/{key}: cannot overwrite a subtree")
            for parent, leaves in groups.items():
                node = root
                for part in parent:
                    node = node.setdefault(part, {})
                for key, v in leaves:
                    node[key] = v
            return self._write(slot, doc, now_ms)

    def update_feature(
        self,
        twin_id: str,
        feature: str,
        props: Mapping[str, object],
        *,
        now_ms: int | None = None,
        checked: bool = False,
    ) -> int:
        """Set flat leaves under ``features/<feature>/properties`` in one write.

        ``checked=True`` skips key/value validation for callers that built
        ``props`` from already-validated data.
        """
        if not checked:
            for key, v in props.items():
                if not (type(v) in _PLAIN or _is_scalar(v)) or not key or "/" in key:
                    raise InvalidPath(f"features/{feature}/properties/{key}: bad key or non-scalar value")
            if not feature or "/" in feature:
                raise InvalidPath(f"bad feature name {feature!r}")
        slot = self._slot(twin_id, create=False)
        if slot is None or slot.doc is None:
            raise TwinNotFound(twin_id)
        with slot.lock:
            doc = slot.doc
            feat = doc.features.get(feature)
            if feat is None:
                feat = doc.features[feature] = {"properties": {}}
            target = feat.setdefault("properties", {})
            for key in props:
                if type(target.get(key)) is dict:
                    raise InvalidPath(f"features/{feature}/properties/{key}: cannot overwrite a subtree")
            target.update(props)
            return self._write(slot, doc, now_ms)

    def ensure_twin(self, twin_id: str, attributes: Mapping | None = None, *, now_ms: int | None = None) -> None:
        slot = self._slot(twin_id)
        with slot.lock:
            if slot.doc is None:
                self._write(slot, TwinDocument(twin_id, dict(attributes or {})), now_ms)

    # -- signatures --------------------------------------------------------

    def append_signature(self, rec: SignatureRecord) -> int:
        """Append to the twin's signature log; returns the assigned sequence."""
        return self.append(rec.twin_id, rec.source, rec.value, rec.timestamp_ms, rec.quality)

    def append(self, twin_id: str, source: str, value: float, timestamp_ms: int, quality: float) -> int:
        if not 0.0 <= quality <= 1.0:
            raise ValueError("quality must lie in [0, 1]")
        if not math.isfinite(value):
            raise ValueError("signature value must be finite")
        slot = self._twins.get(twin_id) or self._slot(twin_id)
        with slot.lock:
            col = slot.columns.get(source)
            if col is None:
                if not source or " " in source or "," in source:
                    raise ValueError(f"bad signature source {source!r}")
                col = slot.columns[source] = _Column()
            seq = slot.last_seq + 1
            if self.root is not None:
                self._log_line(slot, seq, source, value, quality, timestamp_ms)
            col.append(seq, timestamp_ms, value, quality)
            slot.last_seq = seq
            return seq

    def _log_line(self, slot: _Twin, seq: int, source: str, value: float, quality: float, ts: int) -> None:
        if slot.log_fh is None:
            path = self._log_path(slot.twin_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            slot.log_fh = open(path, "a", encoding="utf-8")
        node = slot.twin_id.split("/")[1]
        slot.log_fh.write(
            f"{seq} {source},node={node} value={format_decimal(value)},"
            f"quality={format_decimal(quality)} {ts}\n"
        )
        slot.log_fh.flush()
        if self.fsync:
            os.fsync(slot.log_fh.fileno())

    def signature_count(self, twin_id: str) -> int:
        slot = self._twins.get(twin_id)
        return slot.last_seq if slot else 0

    def signatures(self, twin_id: str, sources: Iterable[str] | None = None) -> list[SignatureRecord]:
        """All records of a twin in sequence order."""
        slot = self._twins.get(twin_id)
        if slot is None:
            return []
        with slot.lock:
            wanted = slot.columns if sources is None else {s: slot.columns[s] for s in sources if s in slot.columns}
            streams = [self._iter_column(twin_id, src, col) for src, col in wanted.items()]
            return list(heapq.merge(*streams, key=lambda r: r.sequence))

    @staticmethod
    def _iter_column(twin_id: str, source: str, col: _Column, n: int | None = None) -> Iterator[SignatureRecord]:
        n = len(col.seq) if n is None else n
        for i in range(n):
            yield SignatureRecord(twin_id, source, col.value[i], col.ts[i], col.quality[i], col.seq[i])

    def select_signatures(self, q: SignatureQuery) -> list[SignatureRecord]:
        """Top ``q.max_results`` records by blended recency/quality score.

        Ties go to the higher sequence number.
        """
        slot = self._twins.get(q.twin_id)
        if slot is None:
            return []
        w = q.recency_weight
        ref = q.reference
        lo, hi, minq = q.from_ms, q.to_ms, q.min_quality
        scored = []
        with slot.lock:
            items = [(s, c, len(c.seq)) for s, c in slot.columns.items() if q.sources is None or s in q.sources]
        for source, col, n in items:
            ts, qual, seq = col.ts, col.quality, col.seq
            for i in range(n):
                t = ts[i]
                if t < lo or t > hi or qual[i] < minq:
                    continue
                score = w * recency(t, lo, ref) + (1.0 - w) * qual[i]
                scored.append((score, seq[i], source, i, col))
        top = heapq.nlargest(q.max_results, scored, key=lambda x: (x[0], x[1]))
        return [
            SignatureRecord(q.twin_id, src, col.value[i], col.ts[i], col.quality[i], seq)
            for _score, seq, src, i, col in top
        ]

    def latest(self, twin_id: str, source: str) -> SignatureRecord | None:
        """Most recently appended record of ``source`` (highest sequence)."""
        slot = self._twins.get(twin_id)
        if slot is None or source not in slot.columns:
            return None
        col = slot.columns[source]
        i = len(col.seq) - 1
        return SignatureRecord(twin_id, source, col.value[i], col.ts[i], col.quality[i], col.seq[i])

    def close(self) -> None:
        with self._lock:
            for slot in self._twins.values():
                with slot.lock:
                    if slot.log_fh is not None:
                        slot.log_fh.close()
                        slot.log_fh = None

    def __enter__(self) -> TwinStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
