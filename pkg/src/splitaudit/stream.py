"""Power Auditor simulation and server-side sliding-window reassembly.

The auditor sends each sample once, in segments of window/ratio; the
inferencer glues the last `ratio` segments into an overlapping window.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SourceExhausted, UnknownClass
from .wire import AuditorPacket, make_packet, points_per_packet, validate_stream_consistency

SYNTH_CLASSES = ("service", "idle", "reboot", "intrusion")  # index == model label


@dataclass(frozen=True)
class StreamConfig:
    sampling_rate: int = 1700
    window_size: int = 1500  # ms
    ratio: int = 3

    @property
    def segment_len(self) -> int:
        return points_per_packet(self.sampling_rate, self.window_size, self.ratio)

    @property
    def window_len(self) -> int:
        return self.segment_len * self.ratio

    @property
    def interval(self) -> float:
        """Seconds between packets."""
        return self.window_size / 1000.0 / self.ratio


# -- trace sources -----------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    idle_mean: float = 1850.0
    idle_noise: float = 4.0
    service_mean: float = 2300.0
    service_swing: float = 60.0
    service_noise: float = 20.0
    reboot_low: float = 1300.0
    reboot_high: float = 2700.0
    reboot_noise: float = 15.0
    intrusion_base: float = 1900.0
    burst_height: float = 1400.0
    burst_noise: float = 10.0
    # Two bursts per block, as (start, end) fractions of the block.
    bursts: tuple = ((0.15, 0.3), (0.6, 0.75))


def _class_index(name: str) -> int:
    try:
        return SYNTH_CLASSES.index(name)
    except ValueError:
        raise UnknownClass(f"unknown trace class {name!r}; choose from {SYNTH_CLASSES}") from None


def _synth_block(cls: int, seed: int, k: int, n: int, sp: SynthParams) -> np.ndarray:
    rng = np.random.default_rng([seed & (2**63 - 1), cls, k])
    t = np.arange(n) / n
    if cls == 1:
        x = sp.idle_mean + rng.normal(0, sp.idle_noise, n)
    elif cls == 0:
        phase = rng.uniform(0, 2 * np.pi)
        x = sp.service_mean + sp.service_swing * np.sin(2 * np.pi * 3 * t + phase) + rng.normal(0, sp.service_noise, n)
    elif cls == 2:
        x = sp.reboot_low + (sp.reboot_high - sp.reboot_low) * t + rng.normal(0, sp.reboot_noise, n)
    else:
        x = sp.intrusion_base + rng.normal(0, sp.burst_noise, n)
        for a, b in sp.bursts:
            x[int(a * n):int(b * n)] += sp.burst_height
    return np.round(x, 3)


class SyntheticTrace:
    """Deterministic labelled toy traces.

    `schedule` is a list of (start_seconds, class) pairs; the stream is built
    from fixed-size blocks, each drawn from its own seeded generator, so any
    slice is reproducible no matter how it is read.
    """

    def __init__(self, schedule, seed: int = 0, sampling_rate: int = 1700,
                 block_len: int = 2550, params: SynthParams = SynthParams()):
        if isinstance(schedule, str):
            schedule = [(0.0, schedule)]
        self.schedule = sorted((float(t), _class_index(c)) for t, c in schedule)
        if not self.schedule or self.schedule[0][0] > 0:
            self.schedule.insert(0, (0.0, self.schedule[0][1] if self.schedule else 1))
        self.seed = seed
        self.sampling_rate = sampling_rate
        self._bounds = [math.ceil(s * sampling_rate) for s, _ in self.schedule]
        self.block_len = block_len
        self.params = params
        self.pos = 0

    def label_at(self, sample: int) -> int:
        label = self.schedule[0][1]
        for bound, (_, cls) in zip(self._bounds, self.schedule):
            if bound <= sample:
                label = cls
        return label

    def slice(self, start: int, stop: int) -> np.ndarray:
        out = np.empty(max(stop - start, 0))
        i = start
        while i < stop:
            k, off = divmod(i, self.block_len)
            take = min(self.block_len - off, stop - i)
            cls = self.label_at(i)
            # keep a class change inside a block sharp
            nxt = next((b for b in self._bounds if i < b < i + take), None)
            if nxt is not None:
                take = nxt - i
            out[i - start:i - start + take] = _synth_block(cls, self.seed, k, self.block_len, self.params)[off:off + take]
            i += take
        return out

    def read(self, n: int) -> np.ndarray:
        out = self.slice(self.pos, self.pos + n)
        self.pos += n
        return out


def synth_trace(cls: str, seed: int, n_samples: int, sampling_rate: int = 1700) -> np.ndarray:
    return SyntheticTrace(cls, seed, sampling_rate).slice(0, n_samples)


class ReplayTrace:
    """Samples from a replay file: '# sampling_rate=<Hz>' then one mW value per line."""

    def __init__(self, path):
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("#") or "sampling_rate=" not in lines[0]:
            raise ValueError(f"{path}: missing '# sampling_rate=<Hz>' header")
        self.sampling_rate = int(lines[0].split("sampling_rate=")[1].split()[0])
        self.samples = np.array([float(v) for v in lines[1:] if v.strip()])
        self.pos = 0

    def read(self, n: int) -> np.ndarray:
        if self.pos + n > len(self.samples):
            raise SourceExhausted(f"replay has {len(self.samples) - self.pos} samples left, need {n}")
        out = self.samples[self.pos:self.pos + n]
        self.pos += n
        return out


def write_replay(path, samples, sampling_rate: int = 1700) -> None:
    with open(path, "w") as fh:
        fh.write(f"# sampling_rate={sampling_rate}\n")
        for v in samples:
            fh.write(f"{float(v)!r}\n")


# -- auditor side ------------------------------------------------------------


def segmenter(source, config: StreamConfig, hostname: str, limit: int | None = None):
    """Yield consecutive, non-overlapping segment packets (server-side scheme)."""
    seq = 0
    while limit is None or seq < limit:
        try:
            samples = source.read(config.segment_len)
        except SourceExhausted:
            return
        yield make_packet(hostname, f"{hostname}-{seq:08d}", samples, config.sampling_rate,
                          config.window_size, config.ratio)
        seq += 1


def client_side_packets(source, config: StreamConfig, hostname: str, limit: int | None = None):
    """Redundant alternative: a full window every interval (each sample sent `ratio` times).

    The auditor pre-fills one window before its first send, so every packet,
    including the first, is a complete window.
    """
    history = deque(maxlen=config.ratio)
    seq = 0
    while limit is None or seq < limit:
        try:
            while True:
                history.append(source.read(config.segment_len))
                if len(history) == config.ratio:
                    break
        except SourceExhausted:
            return
        yield make_packet(hostname, f"{hostname}-full-{seq:08d}", np.concatenate(history),
                          config.sampling_rate, config.window_size, 1)
        seq += 1


# -- inferencer side ---------------------------------------------------------


@dataclass(frozen=True)
class WindowInstance:
    hostname: str
    window_id: int
    samples: np.ndarray
    assembled_at: float
    first_message_id: str = ""


@dataclass
class SegmentBuffer:
    hostname: str
    segments: deque = field(default_factory=deque)
    last: AuditorPacket | None = None
    next_window: int = 0
    resets: int = 0


def reassemble(buffer: SegmentBuffer, incoming: AuditorPacket, clock=time.time) -> WindowInstance | None:
    """Feed one validated packet; returns a window once `ratio` segments are held."""
    if buffer.last is not None and validate_stream_consistency(buffer.last, incoming) is not None:
        buffer.segments.clear()
        buffer.resets += 1
    buffer.last = incoming
    ratio = incoming.sliding_window_ratio
    buffer.segments.append(incoming)
    while len(buffer.segments) > ratio:
        buffer.segments.popleft()
    if len(buffer.segments) < ratio:
        return None
    samples = np.concatenate([np.asarray(p.data_points, dtype=np.float64) for p in buffer.segments])
    win = WindowInstance(buffer.hostname, buffer.next_window, samples, clock(), buffer.segments[0].message_id)
    buffer.next_window += 1
    return win


class Reassembler:
    """One SegmentBuffer per hostname."""

    def __init__(self):
        self.buffers: dict[str, SegmentBuffer] = {}

    def feed(self, packet: AuditorPacket) -> WindowInstance | None:
        buf = self.buffers.get(packet.hostname)
        if buf is None:
            buf = self.buffers[packet.hostname] = SegmentBuffer(packet.hostname)
        return reassemble(buf, packet)

    def reset(self, hostname: str) -> None:
        buf = self.buffers.get(hostname)
        if buf is not None:
            buf.segments.clear()
            buf.last = None
