"""Binary frames exchanged between the Data Inferencer and the Computing Cloud.

    u32 LE  length of everything after this field
    u8      message type
    16B     session id
    u8      round index
    u16 LE  ciphertext count
    ...     serialized CipherVecs, then a type-specific body (HELLO, ERROR)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .errors import FrameError
from .phe import CipherVec

MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<B16sBH")
NO_SESSION = bytes(16)


class MsgType(enum.IntEnum):
    HELLO = 1
    CONV_REQ = 2
    CONV_RESP = 3
    FC_REQ = 4
    FC_RESP = 5
    ERROR = 6


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    HANDSHAKE = 2
    SESSION = 3
    INTERNAL = 4


@dataclass
class Frame:
    type: MsgType
    session_id: bytes = NO_SESSION
    round: int = 0
    ciphers: list = field(default_factory=list)
    body: bytes = b""

    def encode(self) -> bytes:
        if len(self.session_id) != 16:
            raise FrameError("session id must be 16 bytes")
        if len(self.ciphers) > 0xFFFF:
            raise FrameError("too many ciphertexts for one frame")
        parts = [_HEAD.pack(int(self.type), self.session_id, self.round, len(self.ciphers))]
        parts += [c.to_bytes() for c in self.ciphers]
        parts.append(self.body)
        inner = b"".join(parts)
        if len(inner) > MAX_FRAME:
            raise FrameError(f"frame of {len(inner)} bytes exceeds limit")
        return _LEN.pack(len(inner)) + inner


def decode_frame(inner: bytes) -> Frame:
    """Parse a frame body (without its length prefix)."""
    if len(inner) < _HEAD.size:
        raise FrameError("frame shorter than header")
    mtype, sid, rnd, count = _HEAD.unpack_from(inner)
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise FrameError(f"unknown message type {mtype}") from None
    off = _HEAD.size
    ciphers = []
    for _ in range(count):
        ct, off = CipherVec.from_bytes(inner, off)
        ciphers.append(ct)
    body = bytes(inner[off:])
    if body and mtype not in (MsgType.HELLO, MsgType.ERROR):
        raise FrameError(f"{len(body)} trailing bytes in {mtype.name}")
    return Frame(mtype, sid, rnd, ciphers, body)


def split_frames(buf: bytearray) -> list[Frame]:
    """Pop every complete frame off the front of `buf`."""
    frames = []
    while len(buf) >= _LEN.size:
        (n,) = _LEN.unpack_from(buf)
        if n > MAX_FRAME:
            raise FrameError(f"declared frame length {n} exceeds limit")
        if len(buf) < _LEN.size + n:
            break
        inner = bytes(buf[_LEN.size:_LEN.size + n])
        del buf[:_LEN.size + n]
        frames.append(decode_frame(inner))
    return frames


async def read_frame(reader) -> Frame:
    """Read one frame from an asyncio StreamReader; EOF surfaces as IncompleteReadError."""
    head = await reader.readexactly(_LEN.size)
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise FrameError(f"declared frame length {n} exceeds limit")
    return decode_frame(await reader.readexactly(n))


# -- handshake ---------------------------------------------------------------

_HELLO = struct.Struct("<32sBBBB")
_KEYLEN = struct.Struct("<H")
_PACKING_IDS = {"channel": 0, "grouped": 1}


@dataclass(frozen=True)
class Hello:
    config_digest: bytes
    backend_id: int
    conv_profile_id: int
    fc_profile_id: int
    packing: str = "channel"
    conv_eval_key: bytes = b""
    fc_eval_key: bytes = b""

    def same_terms(self, other: "Hello") -> bool:
        return (self.config_digest, self.backend_id, self.conv_profile_id, self.fc_profile_id, self.packing) == (
            other.config_digest, other.backend_id, other.conv_profile_id, other.fc_profile_id, other.packing)

    def encode(self) -> bytes:
        out = _HELLO.pack(self.config_digest, self.backend_id, self.conv_profile_id,
                          self.fc_profile_id, _PACKING_IDS[self.packing])
        for k in (self.conv_eval_key, self.fc_eval_key):
            out += _KEYLEN.pack(len(k)) + k
        return out

    @classmethod
    def decode(cls, body: bytes) -> "Hello":
        if len(body) < _HELLO.size:
            raise FrameError("truncated HELLO body")
        digest, backend, conv_id, fc_id, packing = _HELLO.unpack_from(body)
        packings = {v: k for k, v in _PACKING_IDS.items()}
        if packing not in packings:
            raise FrameError(f"unknown packing id {packing}")
        off = _HELLO.size
        keys = []
        for _ in range(2):
            if len(body) < off + _KEYLEN.size:
                raise FrameError("truncated HELLO key length")
            (n,) = _KEYLEN.unpack_from(body, off)
            off += _KEYLEN.size
            if len(body) < off + n:
                raise FrameError("truncated HELLO key")
            keys.append(body[off:off + n])
            off += n
        if off != len(body):
            raise FrameError("trailing bytes in HELLO")
        return cls(digest, backend, conv_id, fc_id, packings[packing], keys[0], keys[1])


def error_frame(code: ErrorCode, message: str, session_id: bytes = NO_SESSION, round: int = 0) -> Frame:
    return Frame(MsgType.ERROR, session_id, round, [], bytes([int(code)]) + message.encode()[:1024])


def parse_error(frame: Frame) -> tuple[int, str]:
    if not frame.body:
        return int(ErrorCode.INTERNAL), ""
    return frame.body[0], frame.body[1:].decode(errors="replace")
