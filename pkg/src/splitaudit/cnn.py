"""1-D CNN for power-trace classification and its plaintext reference path.

The plaintext functions here are the ground truth the split protocol is
checked against; they are written for clarity rather than speed.

Layout: conv(C kernels of length r, stride s) -> ReLU -> maxpool(p, along
time) -> flatten channel-major -> dense stack -> softmax.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, MalformedFile, ShapeMismatch

CLASS_NAMES = ("IoT Service", "Idle", "Reboot", "Botnet Intrusion")
INTRUSION_LABEL = 3

# (output_width, has_relu) per dense layer; the last entry is num_classes wide.
FC_PRESETS = {
    "single": ((4, False),),
    "dense128": ((128, True), (4, False)),
}
DEFAULT_PRESET = "dense128"


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = 2550
    channels: int = 32
    kernel_len: int = 128
    stride: int = 64
    pool_size: int = 2
    fc_stack: tuple = FC_PRESETS[DEFAULT_PRESET]
    num_classes: int = 4
    class_names: tuple = CLASS_NAMES
    preset: str = DEFAULT_PRESET

    @classmethod
    def from_preset(cls, preset: str = DEFAULT_PRESET, **dims) -> "ModelConfig":
        if preset not in FC_PRESETS:
            raise InvalidConfig(f"unknown fc preset {preset!r}; choose from {sorted(FC_PRESETS)}")
        num_classes = dims.get("num_classes", 4)
        stack = tuple(FC_PRESETS[preset][:-1]) + ((num_classes, False),)
        names = dims.pop("class_names", None)
        if names is None:
            names = CLASS_NAMES if num_classes == 4 else tuple(f"class{i}" for i in range(num_classes))
        return cls(fc_stack=stack, class_names=tuple(names), preset=preset, **dims)

    def digest(self) -> bytes:
        """Stable 32-byte hash of every dimension that affects the wire layout."""
        desc = (
            f"in={self.input_len};C={self.channels};r={self.kernel_len};s={self.stride};"
            f"p={self.pool_size};fc={list(self.fc_stack)};k={self.num_classes};preset={self.preset}"
        )
        return hashlib.sha256(desc.encode()).digest()


@dataclass(frozen=True)
class ShapeInfo:
    conv_out_len: int
    pooled_len: int
    flat_len: int


def derive_shapes(config: ModelConfig) -> ShapeInfo:
    c = config
    if c.kernel_len < 1 or c.channels < 1:
        raise InvalidConfig("kernel_len and channels must be positive")
    if c.input_len < c.kernel_len:
        raise InvalidConfig(f"input_len {c.input_len} < kernel_len {c.kernel_len}")
    if c.stride < 1 or c.pool_size < 1:
        raise InvalidConfig("stride and pool_size must be >= 1")
    if c.num_classes < 2:
        raise InvalidConfig("need at least two classes")
    if len(c.class_names) != c.num_classes:
        raise InvalidConfig("class_names length differs from num_classes")
    if not c.fc_stack or c.fc_stack[-1][0] != c.num_classes:
        raise InvalidConfig("last fc layer must be num_classes wide")
    if any(w < 1 for w, _ in c.fc_stack):
        raise InvalidConfig("fc widths must be positive")
    conv_out = (c.input_len - c.kernel_len) // c.stride + 1
    if conv_out < c.pool_size:
        raise InvalidConfig(f"conv_out_len {conv_out} < pool_size {c.pool_size}")
    pooled = conv_out // c.pool_size
    return ShapeInfo(conv_out, pooled, c.channels * pooled)


@dataclass(frozen=True)
class FCLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    relu: bool


@dataclass(frozen=True)
class ModelParams:
    conv_weights: np.ndarray  # (C, r)
    conv_bias: np.ndarray  # (C,)
    fc_layers: tuple = field(default_factory=tuple)

    def check(self, config: ModelConfig) -> None:
        shapes = derive_shapes(config)
        if self.conv_weights.shape != (config.channels, config.kernel_len):
            raise ShapeMismatch(
                f"conv weights {self.conv_weights.shape} != {(config.channels, config.kernel_len)}"
            )
        if self.conv_bias.shape != (config.channels,):
            raise ShapeMismatch(f"conv bias {self.conv_bias.shape} != {(config.channels,)}")
        if len(self.fc_layers) != len(config.fc_stack):
            raise ShapeMismatch(f"{len(self.fc_layers)} fc layers, config has {len(config.fc_stack)}")
        width = shapes.flat_len
        for i, (layer, (out, relu)) in enumerate(zip(self.fc_layers, config.fc_stack)):
            if layer.weight.shape != (out, width) or layer.bias.shape != (out,):
                raise ShapeMismatch(f"fc layer {i}: {layer.weight.shape} != {(out, width)}")
            if layer.relu != relu:
                raise ShapeMismatch(f"fc layer {i}: relu flag differs from config")
            width = out
        tensors = [self.conv_weights, self.conv_bias]
        for layer in self.fc_layers:
            tensors += [layer.weight, layer.bias]
        if not all(np.all(np.isfinite(t)) for t in tensors):
            raise ShapeMismatch("parameters contain non-finite values")

    def equals(self, other: "ModelParams") -> bool:
        if len(self.fc_layers) != len(other.fc_layers):
            return False
        same = np.array_equal(self.conv_weights, other.conv_weights) and np.array_equal(
            self.conv_bias, other.conv_bias
        )
        for a, b in zip(self.fc_layers, other.fc_layers):
            same = same and np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            same = same and a.relu == b.relu
        return bool(same)


@dataclass(frozen=True)
class Prediction:
    scores: np.ndarray
    probs: np.ndarray
    label: int


def _as_vector(x, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n:
        raise DimensionMismatch(f"{what}: expected length {n}, got shape {x.shape}")
    return x


def conv1d_plain(x, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Strided valid convolution; returns a (C, conv_out_len) map including bias."""
    shapes = derive_shapes(config)
    x = _as_vector(x, config.input_len, "conv input")
    w = np.asarray(params.conv_weights, dtype=np.float64)
    if w.shape != (config.channels, config.kernel_len):
        raise DimensionMismatch(f"conv weights {w.shape}")
    starts = np.arange(shapes.conv_out_len) * config.stride
    windows = x[starts[:, None] + np.arange(config.kernel_len)]  # (conv_out, r)
    return w @ windows.T + np.asarray(params.conv_bias, dtype=np.float64)[:, None]


def relu_maxpool_plain(fmap, config: ModelConfig) -> np.ndarray:
    """ReLU, then non-overlapping max over pool_size positions along time.

    Trailing positions that do not fill a whole pool group are dropped.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    p = config.pool_size
    if fmap.ndim != 2 or fmap.shape[1] < p:
        raise DimensionMismatch(f"feature map shape {fmap.shape} too short for pool size {p}")
    groups = fmap.shape[1] // p
    act = np.maximum(fmap[:, : groups * p], 0.0)
    return act.reshape(fmap.shape[0], groups, p).max(axis=2)


def flatten(pooled) -> np.ndarray:
    """Channel-major flatten: every pooled position of channel 0, then channel 1, ..."""
    return np.asarray(pooled, dtype=np.float64).reshape(-1)


def fc_plain(x, layer: FCLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or layer.weight.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"fc input length {x.shape} vs weight {layer.weight.shape}")
    out = layer.weight @ x + layer.bias
    return np.maximum(out, 0.0) if layer.relu else out


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def make_prediction(scores) -> Prediction:
    scores = np.asarray(scores, dtype=np.float64)
    # np.argmax returns the first maximum: lowest class index wins ties.
    return Prediction(scores=scores, probs=softmax(scores), label=int(np.argmax(scores)))


def plain_scores(x, params: ModelParams, config: ModelConfig) -> np.ndarray:
    h = flatten(relu_maxpool_plain(conv1d_plain(x, params, config), config))
    for layer in params.fc_layers:
        h = fc_plain(h, layer)
    return h


def predict_plain(x, params: ModelParams, config: ModelConfig) -> Prediction:
    return make_prediction(plain_scores(x, params, config))


def gen_synthetic_params(seed: int, config: ModelConfig) -> ModelParams:
    """Deterministic untrained weights, uniform in [-1, 1]."""
    shapes = derive_shapes(config)
    rng = np.random.default_rng(seed)
    conv_w = rng.uniform(-1.0, 1.0, (config.channels, config.kernel_len))
    conv_b = rng.uniform(-1.0, 1.0, config.channels)
    layers = []
    width = shapes.flat_len
    for out, relu in config.fc_stack:
        layers.append(FCLayer(rng.uniform(-1.0, 1.0, (out, width)), rng.uniform(-1.0, 1.0, out), relu))
        width = out
    return ModelParams(conv_w, conv_b, tuple(layers))


# -- parameter file -----------------------------------------------------------

MAGIC = b"DAUD1"
_HEAD = struct.Struct("<7I")  # input_len, C, r, s, p, num_classes, n_fc
_FC_ENTRY = struct.Struct("<2I")  # out_width, has_relu


def save_params(path, params: ModelParams, config: ModelConfig) -> None:
    params.check(config)
    out = bytearray(MAGIC)
    out += _HEAD.pack(
        config.input_len, config.channels, config.kernel_len, config.stride,
        config.pool_size, config.num_classes, len(config.fc_stack),
    )
    for width, relu in config.fc_stack:
        out += _FC_ENTRY.pack(width, int(relu))
    tensors = [params.conv_weights, params.conv_bias]
    for layer in params.fc_layers:
        tensors += [layer.weight, layer.bias]
    for t in tensors:
        out += np.ascontiguousarray(t, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_params_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < len(MAGIC) + _HEAD.size or blob[: len(MAGIC)] != MAGIC:
        raise MalformedFile("missing DAUD1 magic or truncated header")
    off = len(MAGIC)
    input_len, channels, r, s, p, k, n_fc = _HEAD.unpack_from(blob, off)
    off += _HEAD.size
    if n_fc == 0 or n_fc > 64 or len(blob) < off + n_fc * _FC_ENTRY.size:
        raise MalformedFile("bad fc layer count or truncated fc table")
    stack = []
    for _ in range(n_fc):
        width, relu = _FC_ENTRY.unpack_from(blob, off)
        off += _FC_ENTRY.size
        stack.append((width, bool(relu)))
    dims = dict(input_len=input_len, channels=channels, kernel_len=r, stride=s,
                pool_size=p, num_classes=k, fc_stack=tuple(stack))
    return dims, off


def load_params(path, config: ModelConfig) -> ModelParams:
    """Read a parameter file; raises ShapeMismatch if it disagrees with `config`."""
    return _load(Path(path).read_bytes(), config)[0]


def read_model(path) -> tuple[ModelParams, ModelConfig]:
    """Read a parameter file, taking the model config from its header."""
    return _load(Path(path).read_bytes(), None)


def _load(blob: bytes, config: ModelConfig | None) -> tuple[ModelParams, ModelConfig]:
    dims, off = read_params_header(blob)
    if config is None:
        preset = next((n for n, st in FC_PRESETS.items()
                       if tuple(st[:-1]) == dims["fc_stack"][:-1]), "custom")
        names = CLASS_NAMES if dims["num_classes"] == 4 else tuple(
            f"class{i}" for i in range(dims["num_classes"]))
        config = ModelConfig(class_names=names, preset=preset, **dims)
    else:
        file_dims = tuple(dims.values())
        want = (config.input_len, config.channels, config.kernel_len, config.stride,
                config.pool_size, config.num_classes, tuple(config.fc_stack))
        if file_dims != want:
            raise ShapeMismatch(f"file dims {dims} do not match config")
    try:
        shapes = derive_shapes(config)
    except InvalidConfig as exc:
        raise MalformedFile(f"header describes an invalid model: {exc}") from exc

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        end = off + 8 * n
        if end > len(blob):
            raise MalformedFile("truncated tensor data")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off = end
        return arr

    conv_w = take((config.channels, config.kernel_len))
    conv_b = take((config.channels,))
    layers, width = [], shapes.flat_len
    for out, relu in config.fc_stack:
        layers.append(FCLayer(take((out, width)), take((out,)), relu))
        width = out
    if off != len(blob):
        raise MalformedFile(f"{len(blob) - off} trailing bytes")
    params = ModelParams(conv_w, conv_b, tuple(layers))
    try:
        params.check(config)
    except ShapeMismatch as exc:
        raise MalformedFile(str(exc)) from exc
    return params, config
