import asyncio

import numpy as np
import pytest

from splitaudit.errors import FrameError
from splitaudit.messages import (
    MAX_FRAME,
    ErrorCode,
    Frame,
    Hello,
    MsgType,
    decode_frame,
    error_frame,
    parse_error,
    read_frame,
    split_frames,
)
from splitaudit.phe import FC_PROFILE, MockBackend


def _ct():
    b = MockBackend()
    return b.encrypt(np.arange(5.0), b.keygen(FC_PROFILE, 0))


def test_frame_round_trip():
    f = Frame(MsgType.FC_REQ, b"s" * 16, 2, [_ct(), _ct()])
    buf = bytearray(f.encode() + f.encode()[:10])
    out = split_frames(buf)
    assert len(out) == 1 and out[0] == f
    assert len(buf) == 10  # partial frame kept for later


def test_frame_header_layout():
    raw = Frame(MsgType.CONV_REQ, bytes(range(16)), 0, []).encode()
    assert raw[:4] == (1 + 16 + 1 + 2).to_bytes(4, "little")
    assert raw[4] == 2 and raw[5:21] == bytes(range(16)) and raw[21] == 0 and raw[22:24] == b"\0\0"


def test_hello_round_trip():
    h = Hello(b"d" * 32, 1, 1, 2, "grouped", b"k1" * 16, b"k2" * 16)
    assert Hello.decode(h.encode()) == h
    assert h.same_terms(Hello(b"d" * 32, 1, 1, 2, "grouped"))
    for cut in range(len(h.encode())):
        with pytest.raises(FrameError):
            Hello.decode(h.encode()[:cut])
    with pytest.raises(FrameError):
        Hello.decode(h.encode() + b"x")


def test_error_frame():
    f = decode_frame(error_frame(ErrorCode.HANDSHAKE, "nope").encode()[4:])
    assert f.type == MsgType.ERROR and parse_error(f) == (ErrorCode.HANDSHAKE, "nope")


@pytest.mark.parametrize("inner", [b"", b"\x02" * 5, b"\x09" + bytes(19),
                                   b"\x02" + bytes(17) + b"\x01\x00",
                                   b"\x04" + bytes(19) + b"junk"])
def test_bad_frames(inner):
    with pytest.raises(FrameError):
        decode_frame(inner)


def test_oversized_length():
    with pytest.raises(FrameError):
        split_frames(bytearray((MAX_FRAME + 1).to_bytes(4, "little") + b"x"))


def test_read_frame_stream():
    async def go():
        r = asyncio.StreamReader()
        r.feed_data(Frame(MsgType.HELLO, body=b"abc").encode())
        r.feed_eof()
        f = await read_frame(r)
        assert f.body == b"abc"
        with pytest.raises(asyncio.IncompleteReadError):
            await read_frame(r)

    asyncio.run(go())


def test_frame_fuzz_typed():
    rng = np.random.default_rng(3)
    raw = Frame(MsgType.FC_RESP, b"q" * 16, 1, [_ct()]).encode()[4:]
    for _ in range(2000):
        buf = bytearray(raw)
        for _ in range(int(rng.integers(1, 4))):
            buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
        cut = int(rng.integers(0, len(buf) + 1))
        try:
            decode_frame(bytes(buf[:cut]))
        except FrameError:
            pass
