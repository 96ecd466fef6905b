"""Masked split inference between the Data Inferencer and the Computing Cloud.

Convolution becomes an elementwise product plus a block sum once the input
is laid out window by window: block j of the encoded input holds
``x[j*s : j*s + r]``. The cloud multiplies by the tiled kernel, scales by a
positive mask K and adds a zero-sum mask N; the client only sees
``K * (conv + bias)`` after summing each block, applies ReLU and max
pooling (both commute with a positive scale that is constant inside a pool
group) and sends the result back for the dense layers, which use the same
trick with one block per output neuron.

Rounds are numbered 0 (conv) then 1..L (one per dense layer). Before each
dense round the cloud divides out the previous round's K. The last round's
scalar K is never removed; softmax argmax does not care.
"""

from __future__ import annotations

import math
import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .cnn import ModelConfig, ModelParams, Prediction, derive_shapes, make_prediction, relu_maxpool_plain
from .errors import DimensionMismatch, IndivisibleLength, SessionFailed, SlotOverflow
from .phe import CONV_PROFILE, FC_PROFILE, CipherVec, OpCounters, GLOBAL_COUNTERS, SchemeProfile

PACKINGS = ("channel", "grouped")


# -- layout ------------------------------------------------------------------


@dataclass(frozen=True)
class RoundSpec:
    kind: str  # "conv" | "fc"
    index: int  # 0 for conv, 1.. for dense layers
    block_len: int
    block_count: int  # per channel for conv, output neurons for fc
    in_dim: int
    out_dim: int
    removes_prev: bool
    relu: bool
    last: bool


def round_specs(config: ModelConfig) -> list[RoundSpec]:
    shapes = derive_shapes(config)
    specs = [RoundSpec("conv", 0, config.kernel_len, shapes.conv_out_len, config.input_len,
                       config.channels * shapes.conv_out_len, False, True, False)]
    width = shapes.flat_len
    for i, (out, relu) in enumerate(config.fc_stack):
        specs.append(RoundSpec("fc", i + 1, width, out, width, out, True, relu,
                               i == len(config.fc_stack) - 1))
        width = out
    return specs


@dataclass(frozen=True)
class ConvLayout:
    """How the replicated input and per-channel products map onto ciphertexts.

    ``channel`` packing: the encoded input (split on block boundaries if it
    exceeds a ciphertext) is multiplied once per output channel, C products.
    ``grouped`` packing: the input is repeated ``group`` times in a single
    ciphertext and each product covers ``group`` channels at once.
    """

    packing: str
    block_len: int
    blocks_per_channel: int
    channels: int
    slot_count: int
    group: int  # channels per ciphertext (1 in channel mode)
    chunks: tuple  # (first_block, n_blocks) per input ciphertext

    @property
    def channel_len(self) -> int:
        return self.block_len * self.blocks_per_channel

    @property
    def n_outputs(self) -> int:
        if self.packing == "channel":
            return self.channels * len(self.chunks)
        return math.ceil(self.channels / self.group)


def conv_layout(config: ModelConfig, slot_count: int, packing: str = "channel") -> ConvLayout:
    if packing not in PACKINGS:
        raise ValueError(f"packing must be one of {PACKINGS}")
    shapes = derive_shapes(config)
    r, blocks = config.kernel_len, shapes.conv_out_len
    if r > slot_count:
        raise SlotOverflow(f"kernel length {r} exceeds {slot_count} slots")
    per_ct = slot_count // r
    group = slot_count // (r * blocks)
    if packing == "grouped" and group >= 1:
        return ConvLayout("grouped", r, blocks, config.channels, slot_count, min(group, config.channels), ((0, blocks),))
    chunks = tuple((b, min(per_ct, blocks - b)) for b in range(0, blocks, per_ct))
    return ConvLayout("channel", r, blocks, config.channels, slot_count, 1, chunks)


@dataclass(frozen=True)
class EncodedConvInput:
    layout: ConvLayout
    vectors: list  # PlainVec slot arrays, one per input ciphertext

    def logical(self) -> np.ndarray:
        """The conv_out_len * r replicated window vector, before packing."""
        if self.layout.packing == "grouped":
            return self.vectors[0][: self.layout.channel_len]
        return np.concatenate(self.vectors)


def window_replicate(x, config: ModelConfig) -> np.ndarray:
    shapes = derive_shapes(config)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != config.input_len:
        raise DimensionMismatch(f"window length {x.shape} != {config.input_len}")
    starts = np.arange(shapes.conv_out_len) * config.stride
    return x[starts[:, None] + np.arange(config.kernel_len)].reshape(-1)


def encode_conv_input(x, config: ModelConfig, slot_count: int | None = None,
                      packing: str = "channel") -> EncodedConvInput:
    flat = window_replicate(x, config)
    layout = conv_layout(config, slot_count or flat.shape[0], packing)
    if layout.packing == "grouped":
        return EncodedConvInput(layout, [np.tile(flat, layout.group)])
    r = layout.block_len
    return EncodedConvInput(layout, [flat[b * r:(b + n) * r] for b, n in layout.chunks])


def encode_conv_weights(params: ModelParams, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel tiled kernels and slot-0 biases, both (C, conv_out_len * r)."""
    shapes = derive_shapes(config)
    w = np.asarray(params.conv_weights, dtype=np.float64)
    if w.shape != (config.channels, config.kernel_len):
        raise DimensionMismatch(f"conv weights {w.shape}")
    w_enc = np.tile(w, (1, shapes.conv_out_len))
    b_enc = np.zeros_like(w_enc)
    b_enc[:, ::config.kernel_len] = np.asarray(params.conv_bias, dtype=np.float64)[:, None]
    return w_enc, b_enc


def encode_fc_weights(weight, bias) -> tuple[np.ndarray, np.ndarray]:
    """Row b of the weight becomes block b; the bias sits in slot 0 of its block."""
    weight = np.asarray(weight, dtype=np.float64)
    out, width = weight.shape
    b_enc = np.zeros(out * width)
    b_enc[::width] = bias
    return weight.reshape(-1).copy(), b_enc


def encode_fc_input(y, out_dim: int, slot_count: int | None = None) -> list[np.ndarray]:
    """Repeat the flattened input once per output neuron, spilling on block boundaries."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    width = y.shape[0]
    if slot_count is None:
        slot_count = width * out_dim
    per_ct = slot_count // width
    if per_ct < 1:
        raise SlotOverflow(f"fc input of {width} values exceeds {slot_count} slots")
    return [np.tile(y, min(per_ct, out_dim - b)) for b in range(0, out_dim, per_ct)]


def fc_chunks(width: int, out_dim: int, slot_count: int) -> list[tuple[int, int]]:
    per_ct = slot_count // width
    if per_ct < 1:
        raise SlotOverflow(f"fc input of {width} values exceeds {slot_count} slots")
    return [(b, min(per_ct, out_dim - b)) for b in range(0, out_dim, per_ct)]


def client_block_sum(u, block_len: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if block_len < 1 or u.shape[-1] % block_len:
        raise IndivisibleLength(f"length {u.shape[-1]} is not a multiple of block {block_len}")
    return u.reshape(*u.shape[:-1], -1, block_len).sum(axis=-1)


def client_nonlinear(z, config: ModelConfig) -> np.ndarray:
    """ReLU + max pool of the masked conv map (C, conv_out_len)."""
    return relu_maxpool_plain(z, config)


# -- masks -------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPolicy:
    """Ranges for the random masks.

    K is drawn on a dyadic grid (step 2**-scale_bits) inside [k_min, k_max]
    so that products with dyadic data stay exact in float64. N entries are
    integers bounded by ``noise_scale`` times a per-slot magnitude estimate.
    """

    k_min: float = 0.5
    k_max: float = 2.0
    scale_bits: int = 16
    noise_scale: float = 10.0
    input_bound: float = 4096.0
    enabled: bool = True

    def __post_init__(self):
        if not 0 < self.k_min <= self.k_max or not math.isfinite(self.k_max):
            raise ValueError("need 0 < k_min <= k_max < inf")

    @classmethod
    def disabled(cls) -> "MaskPolicy":
        return cls(k_min=1.0, k_max=1.0, noise_scale=0.0, enabled=False)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gen_zero_sum(total_len: int, block_len: int, seed, magnitude: float = 1000.0) -> np.ndarray:
    """Integer-valued vector whose every block of `block_len` sums to exactly 0."""
    if block_len < 1 or total_len % block_len:
        raise IndivisibleLength(f"{total_len} is not a multiple of block {block_len}")
    rng = _rng(seed)
    blocks = total_len // block_len
    bound = int(min(max(magnitude, 0.0), 2.0**40))
    out = np.zeros((blocks, block_len))
    if block_len > 1 and bound > 0:
        free = rng.integers(-bound, bound, size=(blocks, block_len - 1), endpoint=True)
        out[:, :-1] = free
        out[:, -1] = -free.sum(axis=1)
    return out.reshape(-1)


def draw_positive(shape, seed, policy: MaskPolicy = MaskPolicy()) -> np.ndarray:
    rng = _rng(seed)
    step = 2.0 ** -policy.scale_bits
    levels = int(math.floor((policy.k_max - policy.k_min) / step))
    return policy.k_min + step * rng.integers(0, levels, size=shape, endpoint=True)


def gen_positive_scale(config: ModelConfig, seed, policy: MaskPolicy = MaskPolicy()) -> np.ndarray:
    """One draw per (channel, pool group); shape (C, ceil(conv_out_len / p)).

    Trailing conv positions that the pool drops get a group of their own.
    """
    shapes = derive_shapes(config)
    groups = math.ceil(shapes.conv_out_len / config.pool_size)
    return draw_positive((config.channels, groups), seed, policy)


def expand_conv_scale(draws, config: ModelConfig) -> np.ndarray:
    """Slot-level K of shape (C, conv_out_len * r): constant over p*r slots per group."""
    shapes = derive_shapes(config)
    per_block = np.repeat(np.asarray(draws, dtype=np.float64), config.pool_size, axis=1)[:, : shapes.conv_out_len]
    return np.repeat(per_block, config.kernel_len, axis=1)


def pooled_scale(draws, config: ModelConfig) -> np.ndarray:
    """K as seen by the pooled, flattened (channel-major) conv output."""
    pooled = derive_shapes(config).pooled_len
    return np.asarray(draws, dtype=np.float64)[:, :pooled].reshape(-1)


@dataclass(frozen=True)
class RoundMask:
    scale: np.ndarray  # conv: (C, groups); fc: (out,) (constant for the last round)
    noise: np.ndarray  # conv: (C, conv_out_len * r); fc: (out * in,)


@dataclass(frozen=True)
class MaskSet:
    rounds: tuple
    seed: tuple

    def output_scale(self, index: int, config: ModelConfig) -> np.ndarray:
        """K carried by the client-visible output of round `index`, per value."""
        m = self.rounds[index]
        return pooled_scale(m.scale, config) if index == 0 else m.scale


def _magnitude_bounds(params: ModelParams, config: ModelConfig, input_bound: float) -> list[float]:
    """Worst-case |per-slot product| estimate for each round."""
    bounds = []
    w = float(np.max(np.abs(params.conv_weights), initial=0.0))
    bounds.append(w * input_bound)
    act = config.kernel_len * w * input_bound + float(np.max(np.abs(params.conv_bias), initial=0.0))
    for layer in params.fc_layers:
        w = float(np.max(np.abs(layer.weight), initial=0.0))
        bounds.append(w * act)
        act = layer.weight.shape[1] * w * act + float(np.max(np.abs(layer.bias), initial=0.0))
    return bounds


def gen_mask_set(params: ModelParams, config: ModelConfig, seed, policy: MaskPolicy = MaskPolicy()) -> MaskSet:
    """Fresh masks for one inference session; `seed` is any SeedSequence entropy."""
    specs = round_specs(config)
    shapes = derive_shapes(config)
    bounds = _magnitude_bounds(params, config, policy.input_bound)
    base = np.random.SeedSequence(seed)
    rounds = []
    for spec, bound, child in zip(specs, bounds, base.spawn(len(specs))):
        rng = np.random.default_rng(child)
        magnitude = policy.noise_scale * bound if policy.enabled else 0.0
        if spec.kind == "conv":
            scale = gen_positive_scale(config, rng, policy)
            noise = np.stack([
                gen_zero_sum(shapes.conv_out_len * spec.block_len, spec.block_len, rng, magnitude)
                for _ in range(config.channels)
            ])
        else:
            if spec.last:
                scale = np.full(spec.out_dim, draw_positive((), rng, policy))
            else:
                scale = draw_positive(spec.out_dim, rng, policy)
            noise = gen_zero_sum(spec.out_dim * spec.in_dim, spec.in_dim, rng, magnitude)
        rounds.append(RoundMask(np.asarray(scale, dtype=np.float64), noise))
    return MaskSet(tuple(rounds), tuple(seed) if isinstance(seed, (list, tuple)) else (seed,))


def session_seed(master_seed: int, session_id: bytes) -> list[int]:
    return [int(master_seed) & (2**64 - 1), int.from_bytes(session_id, "little")]


# -- cloud side --------------------------------------------------------------


def cloud_linear_round(evaluator, cipher_in: list, spec: RoundSpec, enc_weight: np.ndarray,
                       enc_bias: np.ndarray, mask: RoundMask, config: ModelConfig,
                       layout: ConvLayout | None = None, prev_scale: np.ndarray | None = None) -> list:
    """One masked linear round: returns ciphertexts of K*(W'*x + B') + N.

    For dense rounds `prev_scale` (the K the client's input still carries) is
    divided out first with one extra plaintext multiply per ciphertext.
    """
    out = []
    if spec.kind == "conv":
        k_slots = expand_conv_scale(mask.scale, config)
        mult = k_slots * enc_weight
        add = k_slots * enc_bias + mask.noise
        r = spec.block_len
        if layout.packing == "grouped":
            if len(cipher_in) != 1:
                raise SessionFailed(f"grouped conv expects 1 ciphertext, got {len(cipher_in)}")
            width = layout.group * layout.channel_len
            for c0 in range(0, config.channels, layout.group):
                m = np.zeros(width)
                a = np.zeros(width)
                n = min(layout.group, config.channels - c0)
                m[: n * layout.channel_len] = mult[c0:c0 + n].reshape(-1)
                a[: n * layout.channel_len] = add[c0:c0 + n].reshape(-1)
                out.append(evaluator.add_plain(evaluator.mul_plain(cipher_in[0], m), a))
            return out
        if len(cipher_in) != len(layout.chunks):
            raise SessionFailed(f"conv expects {len(layout.chunks)} ciphertexts, got {len(cipher_in)}")
        for c in range(config.channels):
            for ct, (b, n) in zip(cipher_in, layout.chunks):
                sl = slice(b * r, (b + n) * r)
                out.append(evaluator.add_plain(evaluator.mul_plain(ct, mult[c, sl]), add[c, sl]))
        return out

    width = spec.in_dim
    chunks = fc_chunks(width, spec.out_dim, evaluator.profile.slot_count)
    if len(cipher_in) != len(chunks):
        raise SessionFailed(f"fc round {spec.index} expects {len(chunks)} ciphertexts, got {len(cipher_in)}")
    k_slots = np.repeat(mask.scale, width)
    mult = k_slots * enc_weight
    add = k_slots * enc_bias + mask.noise
    recip = None if prev_scale is None else 1.0 / np.asarray(prev_scale, dtype=np.float64)
    for ct, (b, n) in zip(cipher_in, chunks):
        sl = slice(b * width, (b + n) * width)
        if recip is not None:
            ct = evaluator.mul_plain(ct, np.tile(recip, n))
        out.append(evaluator.add_plain(evaluator.mul_plain(ct, mult[sl]), add[sl]))
    return out


class CloudEngine:
    """Model owner. Holds parameters and per-session masks, never a secret key."""

    def __init__(self, params: ModelParams, config: ModelConfig, backend, master_seed: int = 0,
                 policy: MaskPolicy = MaskPolicy(), max_sessions: int = 4096,
                 counters: OpCounters | None = None):
        params.check(config)
        self.params = params
        self.config = config
        self.backend = backend
        self.master_seed = master_seed
        self.policy = policy
        self.specs = round_specs(config)
        self.counters = counters or OpCounters(GLOBAL_COUNTERS)
        self._conv_enc = encode_conv_weights(params, config)
        self._fc_enc = [encode_fc_weights(l.weight, l.bias) for l in params.fc_layers]
        self._sessions: OrderedDict[bytes, MaskSet] = OrderedDict()
        self._max_sessions = max_sessions
        self._evaluators = {}
        self._lock = threading.Lock()

    def evaluator(self, eval_key: bytes, profile: SchemeProfile):
        key = (eval_key, profile.profile_id)
        with self._lock:
            ev = self._evaluators.get(key)
            if ev is None:
                ev = self._evaluators[key] = self.backend.evaluator(eval_key, profile, self.counters)
            return ev

    def masks(self, session_id: bytes) -> MaskSet:
        with self._lock:
            m = self._sessions.get(session_id)
            if m is not None:
                self._sessions.move_to_end(session_id)
                return m
        m = gen_mask_set(self.params, self.config, session_seed(self.master_seed, session_id), self.policy)
        with self._lock:
            self._sessions[session_id] = m
            while len(self._sessions) > self._max_sessions:
                self._sessions.popitem(last=False)
        return m

    def finish(self, session_id: bytes) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    @property
    def active_sessions(self) -> int:
        return len(self._sessions)

    def run_round(self, session_id: bytes, index: int, cipher_in: list, evaluator,
                  layout: ConvLayout | None = None) -> list:
        if not 0 <= index < len(self.specs):
            raise SessionFailed(f"no round {index}")
        spec = self.specs[index]
        masks = self.masks(session_id)
        if spec.kind == "conv":
            w, b = self._conv_enc
            out = cloud_linear_round(evaluator, cipher_in, spec, w, b, masks.rounds[0], self.config, layout)
        else:
            w, b = self._fc_enc[index - 1]
            prev = masks.output_scale(index - 1, self.config)
            out = cloud_linear_round(evaluator, cipher_in, spec, w, b, masks.rounds[index], self.config,
                                     prev_scale=prev)
        if spec.last:
            self.finish(session_id)
        return out


# -- client side -------------------------------------------------------------

STEP_NAMES = ("step1", "step2", "step3", "step4", "step5", "step6")


class InferenceClient:
    """Key owner (Data Inferencer). Never sees model parameters or masks."""

    def __init__(self, config: ModelConfig, backend, key_seed: int = 0,
                 conv_profile: SchemeProfile = CONV_PROFILE, fc_profile: SchemeProfile = FC_PROFILE,
                 packing: str = "channel", counters: OpCounters | None = None):
        derive_shapes(config)
        self.config = config
        self.backend = backend
        self.conv_key = backend.keygen(conv_profile, key_seed)
        self.fc_key = backend.keygen(fc_profile, key_seed + 1)
        self.specs = round_specs(config)
        self.layout = conv_layout(config, conv_profile.slot_count, packing)
        for spec in self.specs[1:]:
            fc_chunks(spec.in_dim, spec.out_dim, fc_profile.slot_count)
        self.counters = counters or OpCounters(GLOBAL_COUNTERS)

    def session(self, window, session_id: bytes | None = None) -> "ClientSession":
        return ClientSession(self, np.asarray(window, dtype=np.float64), session_id or os.urandom(16))


@dataclass
class ClientSession:
    client: InferenceClient
    window: np.ndarray
    session_id: bytes
    round: int = 0
    hidden: np.ndarray | None = None
    prediction: Prediction | None = None
    timings: dict = field(default_factory=dict)

    def _time(self, step: str, t0: float) -> None:
        self.timings[step] = self.timings.get(step, 0.0) + (time.perf_counter() - t0)

    def conv_request(self) -> list[CipherVec]:
        """Step 1: window-replicate and encrypt."""
        t0 = time.perf_counter()
        c = self.client
        enc = encode_conv_input(self.window, c.config, c.conv_key.profile.slot_count, c.layout.packing)
        cts = [c.backend.encrypt(v, c.conv_key, c.counters) for v in enc.vectors]
        self._time("step1", t0)
        return cts

    def _decrypt(self, cts, key) -> list[np.ndarray]:
        return [self.client.backend.decrypt(ct, key, self.client.counters) for ct in cts]

    def absorb_conv(self, cts: list[CipherVec]) -> None:
        """Step 3: decrypt, block-sum, ReLU + max pool."""
        t0 = time.perf_counter()
        c = self.client
        lay = c.layout
        if len(cts) != lay.n_outputs:
            raise SessionFailed(f"expected {lay.n_outputs} conv ciphertexts, got {len(cts)}")
        plain = self._decrypt(cts, c.conv_key)
        if lay.packing == "grouped":
            u = np.concatenate([p.reshape(-1, lay.channel_len) for p in plain])[: c.config.channels]
        else:
            u = np.concatenate(plain).reshape(c.config.channels, lay.channel_len)
        z = client_block_sum(u, lay.block_len)
        self.hidden = client_nonlinear(z, c.config).reshape(-1)
        self.round = 1
        self._time("step3", t0)

    def fc_request(self) -> list[CipherVec]:
        """Step 4: replicate the current activations per neuron and encrypt."""
        t0 = time.perf_counter()
        c = self.client
        spec = c.specs[self.round]
        vecs = encode_fc_input(self.hidden, spec.out_dim, c.fc_key.profile.slot_count)
        cts = [c.backend.encrypt(v, c.fc_key, c.counters) for v in vecs]
        self._time("step4", t0)
        return cts

    def absorb_fc(self, cts: list[CipherVec]) -> Prediction | None:
        """Step 6 (or an intermediate dense round): block-sum, then ReLU or softmax."""
        t0 = time.perf_counter()
        c = self.client
        spec = c.specs[self.round]
        plain = self._decrypt(cts, c.fc_key)
        v = np.concatenate(plain) if plain else np.zeros(0)
        if v.shape[0] != spec.in_dim * spec.out_dim:
            raise SessionFailed(f"fc round {spec.index}: got {v.shape[0]} slots")
        y = client_block_sum(v, spec.in_dim)
        if spec.relu:
            y = np.maximum(y, 0.0)
        self.hidden = y
        self.round += 1
        if spec.last:
            self.prediction = make_prediction(y)
        self._time("step6", t0)
        return self.prediction

    @property
    def done(self) -> bool:
        return self.prediction is not None


def run_inference_session(client: InferenceClient, cloud: CloudEngine, window,
                          session_id: bytes | None = None) -> Prediction:
    """All six steps in-process, client and cloud alternating."""
    sess = client.session(window, session_id)
    conv_ev = cloud.evaluator(client.conv_key.eval_key, client.conv_key.profile)
    fc_ev = cloud.evaluator(client.fc_key.eval_key, client.fc_key.profile)
    try:
        req = sess.conv_request()
        t0 = time.perf_counter()
        resp = cloud.run_round(sess.session_id, 0, req, conv_ev, client.layout)
        sess.timings["step2"] = time.perf_counter() - t0
        sess.absorb_conv(resp)
        while not sess.done:
            req = sess.fc_request()
            t0 = time.perf_counter()
            resp = cloud.run_round(sess.session_id, sess.round, req, fc_ev)
            sess.timings["step5"] = sess.timings.get("step5", 0.0) + time.perf_counter() - t0
            sess.absorb_fc(resp)
    except SessionFailed:
        cloud.finish(sess.session_id)
        raise
    except Exception as exc:
        cloud.finish(sess.session_id)
        raise SessionFailed(f"session {sess.session_id.hex()} aborted: {exc}") from exc
    return sess.prediction
