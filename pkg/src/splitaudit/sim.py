"""All-in-one simulation: cloud, inferencer and N auditors over localhost TCP."""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cnn import ModelConfig, ModelParams
from .detector import detector_params
from .errors import InvalidConfig
from .metrics import Metrics
from .services import (
    AuditorStats,
    CloudConfig,
    CloudService,
    Inferencer,
    InferencerConfig,
    PredictionEvent,
    packet_rate_kbps,
    run_auditor,
)
from .stream import SYNTH_CLASSES, StreamConfig, SyntheticTrace


def parse_schedule(text: str) -> list[tuple[float, str]]:
    """'0:idle,5:intrusion,8:idle' -> [(0.0, 'idle'), (5.0, 'intrusion'), (8.0, 'idle')]."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        t, sep, cls = part.partition(":")
        if not sep:
            t, cls = "0", part
        try:
            start = float(t)
        except ValueError:
            raise InvalidConfig(f"bad schedule entry {part!r}; expected seconds:class") from None
        if start < 0 or cls not in SYNTH_CLASSES:
            raise InvalidConfig(f"bad schedule entry {part!r}; classes are {SYNTH_CLASSES}")
        out.append((start, cls))
    if not out:
        raise InvalidConfig("empty schedule")
    return out


@dataclass
class SimPlan:
    auditors: int = 1
    schedule: list = field(default_factory=lambda: [(0.0, "idle")])
    duration: float = 15.0
    seed: int = 0
    backend: str = "mock"
    outdir: str = "sim-out"
    preset: str = "dense128"
    params: ModelParams | None = None  # defaults to the hand-built detector
    stream: StreamConfig = field(default_factory=StreamConfig)
    speed: float = 1.0
    queue_depth: int = 8
    key_seed: int = 0
    master_seed: int = 0

    def validate(self) -> None:
        if self.auditors < 1:
            raise InvalidConfig("need at least one auditor")
        if self.duration < 0 or self.speed <= 0:
            raise InvalidConfig("duration must be >= 0 and speed > 0")
        warmup = self.stream.window_size / 1000.0
        if 0 < self.duration < warmup:
            raise InvalidConfig(f"duration {self.duration}s is shorter than the {warmup}s warm-up window")

    @property
    def packets(self) -> int:
        return int(round(self.duration / self.stream.interval, 6))

    def hostname(self, i: int) -> str:
        return f"auditor{i}"

    def trace(self, i: int) -> SyntheticTrace:
        return SyntheticTrace(self.schedule, self.seed + i, self.stream.sampling_rate)


@dataclass
class SimReport:
    plan: SimPlan
    events: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    auditor_stats: list = field(default_factory=list)
    wall_seconds: float = 0.0
    cloud_ops: dict = field(default_factory=dict)

    def labels(self, hostname: str) -> list:
        return [e.label for e in self.events if e.hostname == hostname]

    def truth(self, i: int, window_id: int) -> int:
        """Majority ground-truth class over a window's samples."""
        p = self.plan
        trace = p.trace(i)
        seg = p.stream.segment_len
        start = window_id * seg
        lab = [trace.label_at(start + j) for j in range(0, p.stream.window_len, seg)]
        return max(set(lab), key=lab.count)

    def summary(self) -> str:
        p = self.plan
        lines = [f"auditors {p.auditors}", f"duration_s {p.duration}", f"speed {p.speed}", f"seed {p.seed}",
                 f"backend {p.backend}", f"preset {p.preset}",
                 "schedule " + ",".join(f"{t:g}:{c}" for t, c in p.schedule),
                 f"wall_s {self.wall_seconds:.3f}"]
        preds = [e for e in self.events if e.label is not None]
        sim_seconds = p.duration or 1.0
        lines.append(f"predictions {len(preds)}")
        lines.append(f"throughput_pred_per_s {len(preds) / sim_seconds:.3f}")
        lines.append(f"throughput_pred_per_wall_s {len(preds) / max(self.wall_seconds, 1e-9):.3f}")
        for k in ("windows", "failed_windows", "dropped_windows", "backpressure_drops", "malformed_packets",
                  "auditor_bytes_in", "frame_bytes_out", "cloud_bytes_out", "max_intake_queue", "max_stage_queue"):
            lines.append(f"{k} {int(self.metrics.get(k, 0))}")
        for i, st in enumerate(self.auditor_stats):
            host = p.hostname(i)
            n = sum(1 for e in preds if e.hostname == host)
            lines.append(f"auditor {host} packets={st.packets} bytes={st.bytes_sent} samples={st.samples_sent} "
                         f"predictions={n} kbps={packet_rate_kbps(st, p.stream):.1f}")
        steps = {}
        for e in preds:
            for s, v in e.step_latency.items():
                steps.setdefault(s, []).append(v * 1000.0)
        for s in sorted(steps):
            v = np.array(steps[s])
            lines.append(f"latency_ms {s} mean={v.mean():.3f} p50={np.percentile(v, 50):.3f} "
                         f"p95={np.percentile(v, 95):.3f} max={v.max():.3f}")
        for k in sorted(self.cloud_ops):
            lines.append(f"cloud_op {k} {self.cloud_ops[k]}")
        lines.append("timeline host window_id label truth")
        for e in self.events:
            i = int(e.hostname.removeprefix("auditor"))
            lines.append(f"  {e.hostname} {e.window_id} {e.label_name or 'FAILED'} "
                         f"{SYNTH_CLASSES[self.truth(i, e.window_id)]}")
        return "\n".join(lines) + "\n"

    def write(self, outdir=None) -> Path:
        out = Path(outdir or self.plan.outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(self.summary())
        with open(out / "events.jsonl", "w") as fh:
            for e in self.events:
                fh.write(e.to_json() + "\n")
        return out


async def simulate(plan: SimPlan) -> SimReport:
    plan.validate()
    report = SimReport(plan)
    if plan.packets == 0:
        return report
    config = ModelConfig.from_preset(plan.preset)
    params = plan.params if plan.params is not None else detector_params(config)
    metrics = Metrics()
    cloud = CloudService(params, config, CloudConfig(listen="127.0.0.1:0", backend=plan.backend,
                                                     master_seed=plan.master_seed), metrics)
    host, port = await cloud.start()
    inf = Inferencer(InferencerConfig(listen="127.0.0.1:0", cloud=f"{host}:{port}", preset=plan.preset,
                                      backend=plan.backend, key_seed=plan.key_seed,
                                      queue_depth=plan.queue_depth), config, metrics=metrics)
    t0 = time.monotonic()
    try:
        ih, ip = await inf.start()
        stats = [AuditorStats() for _ in range(plan.auditors)]
        await asyncio.gather(*[run_auditor(f"{ih}:{ip}", plan.trace(i), plan.stream, plan.hostname(i),
                                           plan.packets, plan.speed, stats[i]) for i in range(plan.auditors)])
        # let the last lines reach the inferencer before draining
        expected = plan.auditors * max(plan.packets - plan.stream.ratio + 1, 0)
        deadline = time.monotonic() + 10.0
        while metrics.get("windows") + metrics.get("malformed_packets") < expected and time.monotonic() < deadline:
            await asyncio.sleep(0.01)
        await inf.drain(120.0)
    finally:
        await inf.stop()
        await cloud.stop()
    report.wall_seconds = time.monotonic() - t0
    report.auditor_stats = stats
    report.events = sorted(inf.events, key=lambda e: (e.hostname, e.window_id))
    report.metrics = metrics.snapshot()
    report.cloud_ops = cloud.op_counters()
    return report


def run_sim(plan: SimPlan) -> SimReport:
    report = asyncio.run(simulate(plan))
    report.write()
    return report


def read_events(path) -> list[PredictionEvent]:
    with open(path) as fh:
        return [PredictionEvent(**json.loads(l)) for l in fh if l.strip()]
