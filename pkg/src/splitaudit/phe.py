"""Packed (SIMD slot) encryption interface used by the split protocol.

Only ciphertext-plaintext elementwise multiply and add are exposed. There
is deliberately no rotation primitive: the window-replicated encoding never
needs one, and the ``rotations`` counter exists so tests can prove it.

The shipped backend is :class:`MockBackend`. It hides slot values behind a
keyed XOR stream and computes on them exactly (error 0), which makes
bit-exact protocol tests possible. It is NOT secure: its evaluation key is
enough to strip the mask. Profiles carry the CKKS parameters a real
backend would use.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import (
    DepthExhausted,
    FrameError,
    KeyMismatch,
    SlotLengthMismatch,
    SlotOverflow,
    UnsupportedProfile,
)

MOCK_BACKEND_ID = 1
# Per-slot absolute error budget granted to approximate backends.
APPROX_EPSILON = 1e-4


@dataclass(frozen=True)
class SchemeProfile:
    name: str
    profile_id: int
    poly_modulus_degree: int
    scale: float
    coeff_modulus_bits: tuple
    security_level: int = 128

    @property
    def slot_count(self) -> int:
        return self.poly_modulus_degree // 2

    @property
    def mult_depth(self) -> int:
        # Special primes at both ends of the chain do not buy a rescale.
        return max(len(self.coeff_modulus_bits) - 2, 0)

    def validate(self) -> None:
        n = self.poly_modulus_degree
        if n < 2 or n & (n - 1):
            raise UnsupportedProfile(f"poly_modulus_degree {n} is not a power of two")
        if not self.scale > 0:
            raise UnsupportedProfile("scale must be positive")
        if not self.coeff_modulus_bits:
            raise UnsupportedProfile("empty coefficient modulus chain")
        if not 0 <= self.profile_id <= 255:
            raise UnsupportedProfile("profile id must fit in one byte")


CONV_PROFILE = SchemeProfile("conv", 1, 32768, 2.0**40, (60, 40, 40, 60))
FC_PROFILE = SchemeProfile("fc", 2, 4096, 2.0**20, (30, 20, 20, 30))
PROFILES = {p.name: p for p in (CONV_PROFILE, FC_PROFILE)}


def mock_profile(slot_count: int = 8192) -> SchemeProfile:
    """Test profile with a configurable (power-of-two) slot count."""
    if slot_count < 1 or slot_count & (slot_count - 1):
        raise UnsupportedProfile(f"slot_count {slot_count} is not a power of two")
    log2 = slot_count.bit_length() - 1
    return SchemeProfile(f"mock{slot_count}", 0x80 | log2, 2 * slot_count, 2.0**40, (60, 40, 40, 60))


def profile_by_id(profile_id: int) -> SchemeProfile:
    for p in PROFILES.values():
        if p.profile_id == profile_id:
            return p
    if profile_id & 0x80 and (profile_id & 0x7F) <= 24:
        return mock_profile(1 << (profile_id & 0x7F))
    raise UnsupportedProfile(f"unknown profile id {profile_id}")


def profile_by_name(name: str) -> SchemeProfile:
    if name in PROFILES:
        return PROFILES[name]
    if name.startswith("mock"):
        return mock_profile(int(name[4:] or 8192))
    raise UnsupportedProfile(f"unknown profile {name!r}")


class OpCounters:
    """Thread-safe monotone counters for homomorphic operations."""

    NAMES = ("encrypt", "decrypt", "mul_plain", "add_plain", "rotations")

    def __init__(self, parent: "OpCounters | None" = None):
        self._lock = threading.Lock()
        self._counts = dict.fromkeys(self.NAMES, 0)
        self._parent = parent

    def bump(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._counts[name] += n
        if self._parent is not None:
            self._parent.bump(name, n)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            for k in self._counts:
                self._counts[k] = 0


# Process-wide tally; every evaluator and key also reports here.
GLOBAL_COUNTERS = OpCounters()


@dataclass(frozen=True)
class KeyMaterial:
    key_id: bytes  # 8 bytes, travels with every ciphertext
    secret: bytes
    eval_key: bytes  # public half handed to the cloud
    profile: SchemeProfile
    backend_id: int = MOCK_BACKEND_ID


@dataclass(frozen=True)
class CipherVec:
    backend_id: int
    profile_id: int
    slot_len: int
    payload: bytes

    _HEAD = struct.Struct("<BBII")

    def to_bytes(self) -> bytes:
        return self._HEAD.pack(self.backend_id, self.profile_id, self.slot_len, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, buf, offset: int = 0) -> tuple["CipherVec", int]:
        """Parse one ciphertext at `offset`; returns it and the next offset."""
        head = cls._HEAD
        if len(buf) - offset < head.size:
            raise FrameError("truncated ciphertext header")
        backend, profile, slot_len, plen = head.unpack_from(buf, offset)
        start = offset + head.size
        if len(buf) - start < plen:
            raise FrameError("truncated ciphertext payload")
        return cls(backend, profile, slot_len, bytes(buf[start:start + plen])), start + plen


# Mock payload: key_id(8) | nonce(8) | level(1) | slot_len float64 XOR keystream
_MOCK_HEAD = struct.Struct("<8s8sB")


def _keystream(eval_key: bytes, nonce: bytes, n: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(eval_key + nonce).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(seed)).integers(0, 2**64, size=n, dtype=np.uint64, endpoint=False)


def _seal(eval_key: bytes, key_id: bytes, level: int, values: np.ndarray, nonce: bytes) -> bytes:
    bits = np.ascontiguousarray(values, dtype="<f8").view("<u8")
    masked = bits ^ _keystream(eval_key, nonce, bits.shape[0])
    return _MOCK_HEAD.pack(key_id, nonce, level) + masked.tobytes()


def _open(eval_key: bytes, cipher: CipherVec) -> tuple[bytes, int, np.ndarray]:
    payload = cipher.payload
    if len(payload) != _MOCK_HEAD.size + 8 * cipher.slot_len:
        raise FrameError("mock payload length disagrees with slot_len")
    key_id, nonce, level = _MOCK_HEAD.unpack_from(payload)
    masked = np.frombuffer(payload, dtype="<u8", offset=_MOCK_HEAD.size)
    bits = masked ^ _keystream(eval_key, nonce, cipher.slot_len)
    return key_id, level, bits.view("<f8").astype(np.float64)


class MockBackend:
    """Exact stand-in for a CKKS backend.

    ``nonce_source`` defaults to ``os.urandom``; tests may pin it.
    """

    backend_id = MOCK_BACKEND_ID
    name = "mock"
    epsilon = 0.0

    def __init__(self, nonce_source=None):
        self._nonce = nonce_source or (lambda: os.urandom(8))

    def keygen(self, profile: SchemeProfile, seed: int) -> KeyMaterial:
        profile.validate()
        secret = hashlib.sha256(b"splitaudit-mock-secret" + int(seed).to_bytes(16, "little", signed=True)).digest()
        eval_key = hashlib.sha256(b"eval" + secret).digest()
        key_id = hashlib.sha256(b"id" + eval_key).digest()[:8]
        return KeyMaterial(key_id, secret, eval_key, profile, self.backend_id)

    def encrypt(self, values, key: KeyMaterial, counters: OpCounters | None = None) -> CipherVec:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] > key.profile.slot_count:
            raise SlotOverflow(f"{values.shape[0]} values > {key.profile.slot_count} slots")
        if not np.all(np.isfinite(values)):
            raise ValueError("cannot encrypt non-finite values")
        (counters or GLOBAL_COUNTERS).bump("encrypt")
        payload = _seal(key.eval_key, key.key_id, 0, values, self._nonce())
        return CipherVec(self.backend_id, key.profile.profile_id, values.shape[0], payload)

    def decrypt(self, cipher: CipherVec, key: KeyMaterial, counters: OpCounters | None = None) -> np.ndarray:
        if cipher.backend_id != self.backend_id or cipher.profile_id != key.profile.profile_id:
            raise KeyMismatch("ciphertext was produced under a different backend or profile")
        key_id, _, values = _open(key.eval_key, cipher)
        if key_id != key.key_id:
            raise KeyMismatch("ciphertext was encrypted under another key")
        (counters or GLOBAL_COUNTERS).bump("decrypt")
        return values

    def evaluator(self, eval_key: bytes, profile: SchemeProfile, counters: OpCounters | None = None) -> "MockEvaluator":
        profile.validate()
        return MockEvaluator(eval_key, profile, counters or OpCounters(GLOBAL_COUNTERS), self._nonce)


class MockEvaluator:
    """Cloud-side view: can compute on ciphertexts but holds no secret key."""

    def __init__(self, eval_key: bytes, profile: SchemeProfile, counters: OpCounters, nonce_source):
        self.eval_key = eval_key
        self.key_id = hashlib.sha256(b"id" + eval_key).digest()[:8]
        self.profile = profile
        self.counters = counters
        self._nonce = nonce_source

    def _unwrap(self, cipher: CipherVec, plain) -> tuple[int, np.ndarray, np.ndarray]:
        if cipher.backend_id != MOCK_BACKEND_ID or cipher.profile_id != self.profile.profile_id:
            raise KeyMismatch("ciphertext backend/profile differs from evaluator")
        plain = np.asarray(plain, dtype=np.float64).reshape(-1)
        if plain.shape[0] != cipher.slot_len:
            raise SlotLengthMismatch(f"plaintext has {plain.shape[0]} slots, ciphertext {cipher.slot_len}")
        key_id, level, values = _open(self.eval_key, cipher)
        if key_id != self.key_id:
            raise KeyMismatch("ciphertext was encrypted under another key")
        return level, values, plain

    def _wrap(self, level: int, values: np.ndarray) -> CipherVec:
        payload = _seal(self.eval_key, self.key_id, level, values, self._nonce())
        return CipherVec(MOCK_BACKEND_ID, self.profile.profile_id, values.shape[0], payload)

    def mul_plain(self, cipher: CipherVec, plain) -> CipherVec:
        level, values, plain = self._unwrap(cipher, plain)
        if level >= self.profile.mult_depth:
            raise DepthExhausted(f"modulus chain of {self.profile.name} allows {self.profile.mult_depth} multiplications")
        self.counters.bump("mul_plain")
        return self._wrap(level + 1, values * plain)

    def add_plain(self, cipher: CipherVec, plain) -> CipherVec:
        level, values, plain = self._unwrap(cipher, plain)
        self.counters.bump("add_plain")
        return self._wrap(level, values + plain)

    def op_counters(self) -> dict:
        return self.counters.snapshot()


BACKENDS = {"mock": MockBackend}


def get_backend(name: str = "mock", **kwargs):
    try:
        return BACKENDS[name](**kwargs)
    except KeyError:
        raise UnsupportedProfile(f"unknown backend {name!r}; available: {sorted(BACKENDS)}") from None
