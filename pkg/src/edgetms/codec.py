"""Binary codec for the 67-byte inference message and the telemetry line format.

Inference frame layout (big-endian)::

    offset  size  field
    0       2     magic 0x45 0x49 ("EI")
    2       1     version (1)
    3       1     msg_type (1)
    4       4     packet_id
    8       16    node uuid
    24      8     timestamp_ms
    32      8     frame_seq
    40      4     infer_latency_us
    44      2     total_count
    46      12    class_counts (6 x u16)
    58      2     mean_conf_milli
    60      1     flags
    61      2     reserved (0)
    63      4     crc32 over bytes 0..62
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

from .core import MAX_CLASSES, InvalidReading, NodeId, Source, TelemetryReading

MAGIC = b"EI"
VERSION = 1
MSG_TYPE_INFERENCE = 1

_BODY = struct.Struct(">2sBBI16sQQIH6HHBH")
_CRC = struct.Struct(">I")
MESSAGE_SIZE = _BODY.size + _CRC.size

assert MESSAGE_SIZE == 67


class CodecError(ValueError):
    """Base class for codec failures. ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str | None = None):
        super().__init__(message or code)
        self.code = code


class EncodeError(CodecError):
    pass


class DecodeError(CodecError):
    pass


class TelemetryParseError(CodecError):
    pass


@dataclass(frozen=True, slots=True)
class InferenceMessage:
    packet_id: int
    node: NodeId
    timestamp_ms: int
    frame_seq: int
    infer_latency_us: int
    total_count: int
    class_counts: tuple[int, ...]
    mean_conf_milli: int
    flags: int = 0

    @property
    def mean_confidence(self) -> float:
        return self.mean_conf_milli / 1000.0

    @property
    def infer_latency_ms(self) -> float:
        return self.infer_latency_us / 1000.0


def _check_message(m: InferenceMessage) -> None:
    if len(m.class_counts) != MAX_CLASSES:
        raise EncodeError("shape", f"expected {MAX_CLASSES} class counts")
    if m.total_count != sum(m.class_counts):
        raise EncodeError("count", "total_count does not equal sum of class_counts")
    if m.mean_conf_milli > 1000:
        raise EncodeError("range", "mean_conf_milli exceeds 1000")


def encode_inference(m: InferenceMessage) -> bytes:
    _check_message(m)
    return pack_inference(
        m.packet_id,
        m.node.bytes,
        m.timestamp_ms,
        m.frame_seq,
        m.infer_latency_us,
        m.class_counts,
        m.mean_conf_milli,
        m.flags,
    )


def pack_inference(
    packet_id: int,
    node_bytes: bytes,
    timestamp_ms: int,
    frame_seq: int,
    infer_latency_us: int,
    class_counts: tuple[int, ...],
    mean_conf_milli: int,
    flags: int = 0,
) -> bytes:
    """Field-level encoder; total_count is derived from ``class_counts``."""
    try:
        body = _BODY.pack(
            MAGIC,
            VERSION,
            MSG_TYPE_INFERENCE,
            packet_id,
            node_bytes,
            timestamp_ms,
            frame_seq,
            infer_latency_us,
            sum(class_counts),
            *class_counts,
            mean_conf_milli,
            flags,
            0,
        )
    except struct.error as exc:
        raise EncodeError("range", str(exc)) from exc
    return body + _CRC.pack(zlib.crc32(body))


def unpack_inference(b: bytes) -> tuple:
    """Validated raw fields: (packet_id, node_bytes, timestamp_ms, frame_seq,
    infer_latency_us, total_count, class_counts, mean_conf_milli, flags).

    Checks length, magic, version and CRC before anything else.
    """
    if len(b) != MESSAGE_SIZE:
        raise DecodeError("length", f"expected {MESSAGE_SIZE} bytes, got {len(b)}")
    if type(b) is not bytes:
        b = bytes(b)
    if b[0:2] != MAGIC:
        raise DecodeError("magic")
    if b[2] != VERSION:
        raise DecodeError("version", f"unsupported version {b[2]}")
    (crc,) = _CRC.unpack_from(b, _BODY.size)
    if zlib.crc32(b[: _BODY.size]) != crc:
        raise DecodeError("crc")
    f = _BODY.unpack_from(b)
    msg_type = f[2]
    if msg_type != MSG_TYPE_INFERENCE:
        raise DecodeError("msg_type", f"unexpected message type {msg_type}")
    if f[17] != 0:
        raise DecodeError("reserved")
    counts = f[9:15]
    if f[8] != sum(counts):
        raise DecodeError("count", "total_count does not equal sum of class_counts")
    if f[15] > 1000:
        raise DecodeError("range", "mean_conf_milli exceeds 1000")
    if f[4] == _NIL:
        raise DecodeError("node", "nil node id")
    return (f[3], f[4], f[5], f[6], f[7], f[8], counts, f[15], f[16])


_NIL = bytes(16)


def decode_inference(b: bytes) -> InferenceMessage:
    packet_id, node_raw, ts, seq, latency_us, total, counts, conf, flags = unpack_inference(b)
    try:
        node = NodeId.from_bytes(node_raw)
    except ValueError as exc:
        raise DecodeError("node", str(exc)) from exc
    return InferenceMessage(
        packet_id=packet_id,
        node=node,
        timestamp_ms=ts,
        frame_seq=seq,
        infer_latency_us=latency_us,
        total_count=total,
        class_counts=counts,
        mean_conf_milli=conf,
        flags=flags,
    )


def format_decimal(x: float) -> str:
    """17 significant digits; integral values print without a fractional part."""
    return f"{x:.17g}"


def encode_telemetry_line(r: TelemetryReading) -> str:
    return (
        f"{r.source.value},node={r.node.hex} "
        f"value={format_decimal(r.value)},quality={format_decimal(r.quality)} "
        f"{r.timestamp_ms}"
    )


def split_line(line: str) -> tuple[str, str, float, float, int]:
    """Split ``<source>,node=<hex> value=<v>,quality=<q> <ts>`` into its raw parts.

    Only syntax is checked here; callers decide which source names are legal.
    """
    parts = line.strip("\r\n").split(" ")
    if len(parts) != 3:
        raise TelemetryParseError("syntax", "expected three space-separated sections")
    head, fields, ts_text = parts
    source, sep, tag = head.partition(",")
    if not sep or not source or not tag.startswith("node="):
        raise TelemetryParseError("syntax", "malformed series key")
    kv = dict(item.partition("=")[::2] for item in fields.split(","))
    if set(kv) != {"value", "quality"}:
        raise TelemetryParseError("syntax", "expected value= and quality= fields")
    try:
        value = float(kv["value"])
        quality = float(kv["quality"])
        ts = int(ts_text)
    except ValueError as exc:
        raise TelemetryParseError("syntax", str(exc)) from exc
    return source, tag[len("node="):], value, quality, ts


def parse_telemetry_line(line: str) -> TelemetryReading:
    source_name, node_text, value, quality, ts = split_line(line)
    try:
        source = Source(source_name)
    except ValueError:
        raise TelemetryParseError("unknown source", f"unknown source {source_name!r}") from None
    try:
        node = NodeId.parse(node_text)
    except ValueError as exc:
        raise TelemetryParseError("syntax", f"bad node id: {exc}") from exc
    if not math.isfinite(value):
        raise TelemetryParseError("range", "non-finite value")
    try:
        return TelemetryReading(node, source, value, ts, quality)
    except InvalidReading as exc:
        raise TelemetryParseError("range", str(exc)) from exc
