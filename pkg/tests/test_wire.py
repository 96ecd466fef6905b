import json

import numpy as np
import pytest

from splitaudit.errors import ArithmeticViolation, CountMismatch, MalformedLine, PacketError
from splitaudit.wire import (
    FIELDS,
    AuditorPacket,
    Inconsistency,
    decode_packet,
    encode_packet,
    make_packet,
    points_per_packet,
    validate_stream_consistency,
)


def _pkt(mid="m1", ratio=3, n=None, host="smpg1"):
    n = points_per_packet(1700, 1500, ratio) if n is None else n
    return make_packet(host, mid, np.round(np.linspace(1800, 2200, n), 3), 1700, 1500, ratio)


def test_points_per_packet():
    assert points_per_packet(1700, 1500, 3) == 850
    assert points_per_packet(1000, 1000, 1) == 1000
    for bad in [(1700, 1500, 7), (0, 1500, 3), (1700, 1500, 0), (1700.0, 1500, 3), (True, 1500, 3)]:
        with pytest.raises(ArithmeticViolation):
            points_per_packet(*bad)


def test_round_trip_is_bit_exact():
    x = np.random.default_rng(1).uniform(0, 5000, 850)
    p = make_packet("h", "id", x)
    back = decode_packet(encode_packet(p))
    assert back == p
    np.testing.assert_array_equal(np.array(back.data_points), x)


def test_line_shape():
    line = encode_packet(_pkt())
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert list(json.loads(line)) == list(FIELDS)


def test_count_mismatch():
    obj = json.loads(encode_packet(_pkt()))
    obj["data_points"] = obj["data_points"][:849]
    with pytest.raises(CountMismatch):
        decode_packet(json.dumps(obj).encode())


def test_header_arithmetic_violation():
    obj = json.loads(encode_packet(_pkt()))
    obj["num_data_points"] = 849
    obj["data_points"] = obj["data_points"][:849]
    with pytest.raises(ArithmeticViolation):
        decode_packet(json.dumps(obj).encode())


@pytest.mark.parametrize("mutate", [
    lambda o: o.pop("hostname"),
    lambda o: o.update(extra=1),
    lambda o: o.update(hostname=""),
    lambda o: o.update(hostname=5),
    lambda o: o.update(data_points="abc"),
    lambda o: o["data_points"].__setitem__(0, "x"),
    lambda o: o["data_points"].__setitem__(0, True),
    lambda o: o["data_points"].__setitem__(0, [1.0]),
])
def test_malformed_fields(mutate):
    obj = json.loads(encode_packet(_pkt()))
    mutate(obj)
    with pytest.raises(PacketError):
        decode_packet(json.dumps(obj).encode())


@pytest.mark.parametrize("line", [b"", b"\n", b"{", b"[]", b"null", b"\xff\xfe", b"[" * 100000,
                                  b'{"a": NaN}', b"9" * 10000])
def test_garbage_lines(line):
    with pytest.raises(MalformedLine):
        decode_packet(line)


def test_non_finite_values_rejected():
    line = encode_packet(_pkt()).replace(b"[1800.0", b"[NaN", 1)
    with pytest.raises(MalformedLine):
        decode_packet(line)
    line = encode_packet(_pkt()).replace(b"[1800.0", b"[1e999", 1)
    with pytest.raises(MalformedLine):
        decode_packet(line)
    with pytest.raises(MalformedLine):
        make_packet("h", "i", [np.inf] + [0.0] * 849)


def test_consistency():
    a, b = _pkt("m1"), _pkt("m2")
    assert validate_stream_consistency(a, b) is None
    assert validate_stream_consistency(a, _pkt("m2", ratio=2)) == Inconsistency.CONFIG_CHANGED
    assert validate_stream_consistency(a, _pkt("m1")) == Inconsistency.DUPLICATE_ID
    assert validate_stream_consistency(a, _pkt("m2", host="other")) == Inconsistency.HOST_CHANGED


def test_fuzz_typed_errors():
    rng = np.random.default_rng(7)
    line = encode_packet(_pkt())
    for _ in range(3000):
        buf = bytearray(line)
        for _ in range(int(rng.integers(1, 6))):
            buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
        try:
            decode_packet(bytes(buf))
        except PacketError:
            pass
