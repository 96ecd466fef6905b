"""Power Auditor packet codec.

One packet per newline-terminated JSON object carrying the seven header
fields of the auditor interface. The auditor only ever connects out; the
inferencer never writes back on this connection.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

from .errors import ArithmeticViolation, CountMismatch, MalformedLine

FIELDS = (
    "hostname",
    "message_id",
    "sampling_rate",
    "window_size",
    "sliding_window_ratio",
    "num_data_points",
    "data_points",
)
MAX_LINE = 4 * 1024 * 1024


def points_per_packet(sampling_rate: int, window_size: int, ratio: int) -> int:
    """rate * window_ms / 1000 / ratio, rejected unless it is a positive integer."""
    for name, v in (("sampling_rate", sampling_rate), ("window_size", window_size)):
        if not _is_int(v) or v <= 0:
            raise ArithmeticViolation(f"{name} must be a positive integer, got {v!r}")
    if not _is_int(ratio) or ratio < 1:
        raise ArithmeticViolation(f"sliding_window_ratio must be >= 1, got {ratio!r}")
    num, den = sampling_rate * window_size, 1000 * ratio
    if num % den:
        raise ArithmeticViolation(f"{sampling_rate}*{window_size}/1000/{ratio} is not an integer")
    return num // den


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


@dataclass(frozen=True)
class AuditorPacket:
    hostname: str
    message_id: str
    sampling_rate: int
    window_size: int
    sliding_window_ratio: int
    num_data_points: int
    data_points: tuple

    def validate(self) -> None:
        if not isinstance(self.hostname, str) or not self.hostname:
            raise MalformedLine("hostname must be a non-empty string")
        if not isinstance(self.message_id, str) or not self.message_id:
            raise MalformedLine("message_id must be a non-empty string")
        expected = points_per_packet(self.sampling_rate, self.window_size, self.sliding_window_ratio)
        if self.num_data_points != expected:
            raise ArithmeticViolation(f"num_data_points {self.num_data_points!r} != {expected}")
        if len(self.data_points) != self.num_data_points:
            raise CountMismatch(f"header says {self.num_data_points} points, body has {len(self.data_points)}")
        for v in self.data_points:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise MalformedLine(f"data point {v!r} is not a finite number")

    @property
    def config(self) -> tuple:
        return self.sampling_rate, self.window_size, self.sliding_window_ratio


def make_packet(hostname: str, message_id: str, samples, sampling_rate: int = 1700,
                window_size: int = 1500, ratio: int = 3) -> AuditorPacket:
    n = points_per_packet(sampling_rate, window_size, ratio)
    p = AuditorPacket(hostname, message_id, sampling_rate, window_size, ratio, n,
                      tuple(float(v) for v in samples))
    p.validate()
    return p


def encode_packet(p: AuditorPacket) -> bytes:
    p.validate()
    obj = {name: getattr(p, name) for name in FIELDS}
    obj["data_points"] = [float(v) for v in p.data_points]
    # json writes floats with repr(): shortest text that round-trips exactly.
    return json.dumps(obj, separators=(",", ":"), allow_nan=False).encode() + b"\n"


def _reject_constant(name):
    raise MalformedLine(f"non-finite constant {name}")


def decode_packet(line: bytes) -> AuditorPacket:
    if len(line) > MAX_LINE:
        raise MalformedLine("line too long")
    try:
        obj = json.loads(line, parse_constant=_reject_constant)
    except MalformedLine:
        raise
    except (ValueError, UnicodeDecodeError, RecursionError) as exc:
        raise MalformedLine(f"not a JSON object: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != set(FIELDS):
        raise MalformedLine("packet must have exactly the seven header fields")
    points = obj["data_points"]
    if not isinstance(points, list):
        raise MalformedLine("data_points must be a list")
    p = AuditorPacket(*(obj[name] for name in FIELDS[:-1]), tuple(points))
    p.validate()
    return AuditorPacket(*(obj[name] for name in FIELDS[:-1]), tuple(float(v) for v in points))


class Inconsistency(str, enum.Enum):
    CONFIG_CHANGED = "config-changed"
    DUPLICATE_ID = "duplicate-id"
    HOST_CHANGED = "host-changed"


def validate_stream_consistency(prev: AuditorPacket, nxt: AuditorPacket) -> Inconsistency | None:
    """None when `nxt` may extend the stream that `prev` belongs to."""
    if prev.hostname != nxt.hostname:
        return Inconsistency.HOST_CHANGED
    if prev.config != nxt.config:
        return Inconsistency.CONFIG_CHANGED
    if prev.message_id == nxt.message_id:
        return Inconsistency.DUPLICATE_ID
    return None
