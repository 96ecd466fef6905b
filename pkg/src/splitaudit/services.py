"""Data Inferencer and Computing Cloud services, plus the simulated auditor loop.

Everything runs on asyncio. Crypto and numpy work goes to a thread pool
so one slow step never blocks socket handling. The inferencer holds keys
but never parameters or masks; the cloud holds parameters and masks but
only the public evaluation half of the client's keys.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cnn import INTRUSION_LABEL, ModelConfig, ModelParams
from .errors import (
    CloudUnavailable,
    CryptoError,
    FrameError,
    HandshakeMismatch,
    PacketError,
    SessionFailed,
    SplitAuditError,
)
from .messages import ErrorCode, Frame, Hello, MsgType, error_frame, parse_error, read_frame
from .metrics import Metrics
from .phe import get_backend, profile_by_id, profile_by_name
from .pipeline import Completion, Pipeline, Stage
from .protocol import CloudEngine, InferenceClient, MaskPolicy, conv_layout
from .stream import Reassembler, StreamConfig, segmenter
from .wire import decode_packet, encode_packet

log = logging.getLogger(__name__)


def parse_addr(addr: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    """'host:port' or ':port'."""
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"bad address {addr!r}; expected host:port")
    return host or default_host, int(port)


# -- Computing Cloud ---------------------------------------------------------


@dataclass
class CloudConfig:
    listen: str = "127.0.0.1:7002"
    params_path: str = ""
    backend: str = "mock"
    conv_profile: str = "conv"
    fc_profile: str = "fc"
    workers: int = 4
    master_seed: int = 0
    masking: bool = True


class _CloudConn:
    def __init__(self):
        self.hello: Hello | None = None
        self.conv_ev = None
        self.fc_ev = None
        self.layout = None


class CloudService:
    """Serves Steps 2 and 5 for any number of inferencer connections."""

    def __init__(self, params: ModelParams, config: ModelConfig, cfg: CloudConfig = CloudConfig(),
                 metrics: Metrics | None = None):
        self.cfg = cfg
        self.config = config
        self.backend = get_backend(cfg.backend)
        self.conv_profile = profile_by_name(cfg.conv_profile)
        self.fc_profile = profile_by_name(cfg.fc_profile)
        policy = MaskPolicy() if cfg.masking else MaskPolicy.disabled()
        self.engine = CloudEngine(params, config, self.backend, cfg.master_seed, policy)
        self.metrics = metrics or Metrics()
        self.pool = ThreadPoolExecutor(max_workers=max(cfg.workers, 1), thread_name_prefix="cloud")
        self._server: asyncio.AbstractServer | None = None
        self._conns: set = set()

    def expected_hello(self) -> Hello:
        return Hello(self.config.digest(), self.backend.backend_id, self.conv_profile.profile_id,
                     self.fc_profile.profile_id)

    def handle(self, frame: Frame, conn: _CloudConn) -> Frame:
        """Synchronous request handler; runs in the worker pool."""
        m = self.metrics
        if frame.type == MsgType.HELLO:
            try:
                hello = Hello.decode(frame.body)
            except FrameError as exc:
                return error_frame(ErrorCode.MALFORMED, str(exc))
            want = self.expected_hello()
            if not (hello.config_digest == want.config_digest and hello.backend_id == want.backend_id
                    and hello.conv_profile_id == want.conv_profile_id
                    and hello.fc_profile_id == want.fc_profile_id):
                m.inc("cloud_handshake_rejected")
                return error_frame(ErrorCode.HANDSHAKE, "config hash, backend or profile mismatch")
            conn.hello = hello
            conn.conv_ev = self.engine.evaluator(hello.conv_eval_key, self.conv_profile)
            conn.fc_ev = self.engine.evaluator(hello.fc_eval_key, self.fc_profile)
            conn.layout = conv_layout(self.config, self.conv_profile.slot_count, hello.packing)
            m.inc("cloud_handshakes")
            return Frame(MsgType.HELLO, body=Hello(want.config_digest, want.backend_id, want.conv_profile_id,
                                                   want.fc_profile_id, hello.packing).encode())
        if conn.hello is None:
            return error_frame(ErrorCode.HANDSHAKE, "HELLO required first", frame.session_id, frame.round)
        try:
            t0 = time.perf_counter()
            if frame.type == MsgType.CONV_REQ and frame.round == 0:
                out = self.engine.run_round(frame.session_id, 0, frame.ciphers, conn.conv_ev, conn.layout)
                m.inc("cloud_step2_seconds", time.perf_counter() - t0)
                m.inc("cloud_conv_rounds")
                return Frame(MsgType.CONV_RESP, frame.session_id, 0, out)
            if frame.type == MsgType.FC_REQ and frame.round >= 1:
                out = self.engine.run_round(frame.session_id, frame.round, frame.ciphers, conn.fc_ev)
                m.inc("cloud_step5_seconds", time.perf_counter() - t0)
                m.inc("cloud_fc_rounds")
                return Frame(MsgType.FC_RESP, frame.session_id, frame.round, out)
        except (SessionFailed, CryptoError, FrameError, ValueError) as exc:
            self.engine.finish(frame.session_id)
            m.inc("cloud_session_errors")
            return error_frame(ErrorCode.SESSION, str(exc), frame.session_id, frame.round)
        m.inc("cloud_session_errors")
        return error_frame(ErrorCode.SESSION, f"unexpected {frame.type.name} for round {frame.round}",
                           frame.session_id, frame.round)

    async def _serve_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = _CloudConn()
        loop = asyncio.get_running_loop()
        tasks: set = set()
        self._conns.add(writer)
        self.metrics.inc("cloud_connections")

        async def respond(frame: Frame):
            try:
                resp = await loop.run_in_executor(self.pool, self.handle, frame, conn)
                data = resp.encode()
            except Exception as exc:  # never let one request take the server down
                log.exception("cloud handler failed")
                data = error_frame(ErrorCode.INTERNAL, str(exc), frame.session_id, frame.round).encode()
            if not writer.is_closing():
                writer.write(data)
                self.metrics.inc("cloud_bytes_out", len(data))
                await writer.drain()

        try:
            while True:
                try:
                    frame = await read_frame(reader)
                except FrameError as exc:
                    self.metrics.inc("cloud_malformed_frames")
                    writer.write(error_frame(ErrorCode.MALFORMED, str(exc)).encode())
                    await writer.drain()
                    break
                self.metrics.inc("cloud_frames_in")
                if frame.type == MsgType.HELLO:
                    # handshake is ordered before any request on this connection
                    await respond(frame)
                    continue
                t = loop.create_task(respond(frame))
                tasks.add(t)
                t.add_done_callback(tasks.discard)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            for t in list(tasks):
                t.cancel()
            self._conns.discard(writer)
            writer.close()

    async def start(self) -> tuple[str, int]:
        host, port = parse_addr(self.cfg.listen)
        self._server = await asyncio.start_server(self._serve_conn, host, port)
        return self._server.sockets[0].getsockname()[:2]

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            for w in list(self._conns):
                w.close()
            await self._server.wait_closed()
        self.pool.shutdown(wait=False, cancel_futures=True)

    def op_counters(self) -> dict:
        return self.engine.counters.snapshot()


# -- transports (inferencer -> cloud) ----------------------------------------


class LocalTransport:
    """Calls a CloudService directly, without sockets; used by tests."""

    def __init__(self, cloud: CloudService):
        self.cloud = cloud
        self.conn = _CloudConn()

    async def connect(self, hello: Hello) -> None:
        resp = self.cloud.handle(Frame(MsgType.HELLO, body=hello.encode()), self.conn)
        if resp.type == MsgType.ERROR:
            raise HandshakeMismatch(parse_error(resp)[1])

    async def request(self, frame: Frame) -> Frame:
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.cloud.pool, self.cloud.handle, frame, self.conn)

    async def close(self) -> None:
        pass


class TcpTransport:
    """One multiplexed connection; responses are matched by (session id, round)."""

    def __init__(self, addr: str, timeout: float = 10.0, backoff: tuple = (0.2, 5.0),
                 metrics: Metrics | None = None):
        self.addr = addr
        self.timeout = timeout
        self.backoff_min, self.backoff_max = backoff
        self.metrics = metrics or Metrics()
        self._hello: Hello | None = None
        self._reader = self._writer = None
        self._pending: dict = {}
        self._read_task = None
        self._lock = asyncio.Lock()
        self._next_try = 0.0
        self._delay = self.backoff_min

    @property
    def connected(self) -> bool:
        return self._writer is not None and not self._writer.is_closing()

    async def connect(self, hello: Hello) -> None:
        self._hello = hello
        await self._ensure()

    async def _ensure(self) -> None:
        if self.connected:
            return
        async with self._lock:
            if self.connected:
                return
            now = time.monotonic()
            if now < self._next_try:
                raise CloudUnavailable(f"cloud {self.addr} unreachable; retrying in {self._next_try - now:.1f}s")
            host, port = parse_addr(self.addr)
            try:
                reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), self.timeout)
                writer.write(Frame(MsgType.HELLO, body=self._hello.encode()).encode())
                await writer.drain()
                resp = await asyncio.wait_for(read_frame(reader), self.timeout)
            except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, FrameError) as exc:
                self.metrics.inc("cloud_connect_failures")
                self._next_try = time.monotonic() + self._delay
                self._delay = min(self._delay * 2, self.backoff_max)
                raise CloudUnavailable(f"cannot reach cloud {self.addr}: {exc}") from exc
            if resp.type != MsgType.HELLO:
                writer.close()
                raise HandshakeMismatch(parse_error(resp)[1] if resp.type == MsgType.ERROR else "bad handshake reply")
            self._delay = self.backoff_min
            self._reader, self._writer = reader, writer
            self._read_task = asyncio.get_running_loop().create_task(self._read_loop(reader))
            self.metrics.inc("cloud_connects")

    async def _read_loop(self, reader) -> None:
        err: Exception = CloudUnavailable("connection to cloud lost")
        try:
            while True:
                frame = await read_frame(reader)
                self.metrics.inc("frames_in")
                if frame.type == MsgType.ERROR and frame.session_id == bytes(16):
                    err = SessionFailed("cloud closed connection: " + parse_error(frame)[1])
                    break
                fut = self._pending.pop((frame.session_id, frame.round), None)
                if fut is not None and not fut.done():
                    fut.set_result(frame)
        except (asyncio.IncompleteReadError, ConnectionError, FrameError) as exc:
            err = CloudUnavailable(f"connection to cloud lost: {exc}")
        except asyncio.CancelledError:
            pass
        finally:
            if self._writer is not None:
                self._writer.close()
            self._writer = None
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(err)
            self._pending.clear()

    async def request(self, frame: Frame) -> Frame:
        await self._ensure()
        key = (frame.session_id, frame.round)
        fut = asyncio.get_running_loop().create_future()
        self._pending[key] = fut
        data = frame.encode()
        try:
            self._writer.write(data)
            self.metrics.inc("frame_bytes_out", len(data))
            await self._writer.drain()
            return await asyncio.wait_for(fut, self.timeout)
        except asyncio.TimeoutError:
            raise SessionFailed(f"cloud did not answer round {frame.round} in {self.timeout}s") from None
        except (ConnectionError, AttributeError) as exc:
            raise CloudUnavailable(f"connection to cloud lost: {exc}") from None
        finally:
            self._pending.pop(key, None)

    async def close(self) -> None:
        if self._read_task is not None:
            self._read_task.cancel()
            await asyncio.gather(self._read_task, return_exceptions=True)
        if self._writer is not None:
            self._writer.close()


# -- Data Inferencer ---------------------------------------------------------


@dataclass
class InferencerConfig:
    listen: str = "127.0.0.1:7001"
    cloud: str = "127.0.0.1:7002"
    preset: str = "dense128"
    backend: str = "mock"
    conv_profile: str = "conv"
    fc_profile: str = "fc"
    packing: str = "channel"
    key_seed: int = 0
    queue_depth: int = 8
    cloud_workers: int = 4
    client_workers: int = 1
    serial: bool = False
    alert_log: str = ""
    hook_url: str = ""
    event_log: str = ""
    cloud_timeout: float = 10.0

    def __post_init__(self):
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")


@dataclass
class PredictionEvent:
    hostname: str
    window_id: int
    label: int | None
    label_name: str
    scores: list
    step_latency: dict
    assembled_at: float
    completed_at: float
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, separators=(",", ":"))


@dataclass
class _Job:
    window: object
    session: object = None
    payload: list = field(default_factory=list)


STEP_OF_STAGE = {"encrypt_input": "step1", "cloud_conv": "step2", "conv_nonlinear": "step3",
                 "encrypt_hidden": "step4", "cloud_fc": "step5", "dense_output": "step6"}


class Inferencer:
    """Accepts auditor connections, assembles windows, runs the protocol pipeline."""

    def __init__(self, cfg: InferencerConfig, model_config: ModelConfig | None = None,
                 transport=None, metrics: Metrics | None = None, on_event=None):
        self.cfg = cfg
        self.model_config = model_config or ModelConfig.from_preset(cfg.preset)
        self.metrics = metrics or Metrics()
        self.backend = get_backend(cfg.backend)
        self.client = InferenceClient(self.model_config, self.backend, cfg.key_seed,
                                      profile_by_name(cfg.conv_profile), profile_by_name(cfg.fc_profile),
                                      cfg.packing)
        self.transport = transport or TcpTransport(cfg.cloud, cfg.cloud_timeout, metrics=self.metrics)
        self.pool = ThreadPoolExecutor(max_workers=max(cfg.client_workers, 1), thread_name_prefix="inferencer")
        self.events: list[PredictionEvent] = []
        self.on_event = on_event
        self.pipeline: Pipeline | None = None
        self._server = None
        self._conn_writers: set = set()
        self._hook_tasks: set = set()

    def hello(self) -> Hello:
        c = self.client
        return Hello(self.model_config.digest(), self.backend.backend_id, c.conv_key.profile.profile_id,
                     c.fc_key.profile.profile_id, self.cfg.packing, c.conv_key.eval_key, c.fc_key.eval_key)

    # -- pipeline stages (steps 1..6) ------------------------------------------

    def _stages(self) -> list[Stage]:
        cw, nw = self.cfg.client_workers, self.cfg.cloud_workers

        def encrypt_input(job: _Job) -> _Job:
            job.session = self.client.session(job.window.samples)
            job.payload = job.session.conv_request()
            return job

        async def cloud_conv(job: _Job) -> _Job:
            job.payload = await self._round(job, MsgType.CONV_REQ, MsgType.CONV_RESP)
            return job

        def conv_nonlinear(job: _Job) -> _Job:
            job.session.absorb_conv(job.payload)
            return job

        def encrypt_hidden(job: _Job) -> _Job:
            job.payload = job.session.fc_request()
            return job

        async def cloud_fc(job: _Job) -> _Job:
            job.payload = await self._round(job, MsgType.FC_REQ, MsgType.FC_RESP)
            return job

        def dense_output(job: _Job) -> _Job:
            job.session.absorb_fc(job.payload)
            return job

        stages = [Stage("encrypt_input", encrypt_input, cw), Stage("cloud_conv", cloud_conv, nw),
                  Stage("conv_nonlinear", conv_nonlinear, cw)]
        for _ in self.model_config.fc_stack:
            stages += [Stage("encrypt_hidden", encrypt_hidden, cw), Stage("cloud_fc", cloud_fc, nw),
                       Stage("dense_output", dense_output, cw)]
        return stages

    async def _round(self, job: _Job, req_type: MsgType, resp_type: MsgType) -> list:
        sess = job.session
        resp = await self.transport.request(Frame(req_type, sess.session_id, sess.round, job.payload))
        if resp.type == MsgType.ERROR:
            code, msg = parse_error(resp)
            raise SessionFailed(f"cloud error {code}: {msg}")
        if resp.type != resp_type or resp.round != sess.round:
            raise SessionFailed(f"unexpected {resp.type.name} for round {sess.round}")
        return resp.ciphers

    def _complete(self, c: Completion) -> None:
        win = c.item.window if isinstance(c.item, _Job) else c.item
        steps: dict = {}
        for name, secs in c.stage_times.items():
            steps[STEP_OF_STAGE[name]] = steps.get(STEP_OF_STAGE[name], 0.0) + secs
        pred = getattr(c.item.session, "prediction", None) if isinstance(c.item, _Job) else None
        m = self.metrics
        if c.ok and pred is not None:
            ev = PredictionEvent(win.hostname, win.window_id, pred.label, self.model_config.class_names[pred.label],
                                 [float(v) for v in pred.scores], steps, win.assembled_at, time.time())
            m.inc("predictions")
            m.inc(f"predictions_label_{pred.label}")
        else:
            err = c.error or SessionFailed("no prediction")
            ev = PredictionEvent(win.hostname, win.window_id, None, "", [], steps, win.assembled_at, time.time(),
                                 f"{type(err).__name__}: {err}")
            m.inc("failed_windows")
            if isinstance(err, (CloudUnavailable,)):
                m.inc("dropped_windows")
        for step, secs in steps.items():
            m.inc(f"{step}_seconds", secs)
        self.events.append(ev)
        if self.cfg.event_log:
            with open(self.cfg.event_log, "a") as fh:
                fh.write(ev.to_json() + "\n")
        if ev.label == INTRUSION_LABEL:
            self._fire_hook(ev)
        if self.on_event is not None:
            self.on_event(ev)

    def _fire_hook(self, ev: PredictionEvent) -> None:
        m = self.metrics
        m.inc("alerts")
        if self.cfg.alert_log:
            try:
                with open(self.cfg.alert_log, "a") as fh:
                    fh.write(f"ALERT {ev.hostname} window={ev.window_id} label={ev.label_name}\n")
            except OSError as exc:
                m.inc("hook_failures")
                log.warning("alert log write failed: %s", exc)
        if self.cfg.hook_url:
            loop = asyncio.get_running_loop()
            t = loop.create_task(self._post(ev))
            self._hook_tasks.add(t)
            t.add_done_callback(self._hook_tasks.discard)

    async def _post(self, ev: PredictionEvent) -> None:
        def post():
            req = urllib.request.Request(self.cfg.hook_url, ev.to_json().encode(),
                                         {"Content-Type": "application/json"})
            with urllib.request.urlopen(req, timeout=5):
                pass

        try:
            await asyncio.get_running_loop().run_in_executor(None, post)
        except Exception as exc:
            self.metrics.inc("hook_failures")
            log.warning("hook POST failed: %s", exc)

    def _dropped(self, key, item) -> None:
        self.metrics.inc("dropped_windows")
        self.metrics.inc("backpressure_drops")

    # -- auditor side ----------------------------------------------------------

    async def _serve_auditor(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        # a fresh connection gets fresh buffers
        reasm = Reassembler()
        m = self.metrics
        self._conn_writers.add(writer)
        m.inc("auditor_connections")
        try:
            while True:
                try:
                    line = await reader.readline()
                except (asyncio.LimitOverrunError, ValueError):
                    m.inc("malformed_packets")
                    break
                if not line:
                    break
                m.inc("auditor_bytes_in", len(line))
                self.feed_line(line, reasm)
        except ConnectionError:
            pass
        finally:
            self._conn_writers.discard(writer)
            writer.close()

    def feed_line(self, line: bytes, reasm: Reassembler) -> None:
        m = self.metrics
        try:
            pkt = decode_packet(line)
        except PacketError as exc:
            m.inc("malformed_packets")
            log.debug("rejected packet: %s", exc)
            return
        m.inc("packets")
        m.inc("samples_in", pkt.num_data_points)
        before = sum(b.resets for b in reasm.buffers.values())
        win = reasm.feed(pkt)
        m.inc("buffer_resets", sum(b.resets for b in reasm.buffers.values()) - before)
        if win is not None:
            if len(win.samples) != self.model_config.input_len:
                m.inc("wrong_length_windows")
                return
            m.inc("windows")
            self.pipeline.submit(win.hostname, _Job(win))
            m.gauge_max("max_intake_queue", self.pipeline.max_intake)

    async def start(self) -> tuple[str, int]:
        self.pipeline = Pipeline(self._stages(), self.cfg.queue_depth, self._complete, self._dropped,
                                 self.cfg.serial, self.pool)
        self.pipeline.start()
        try:
            await self.transport.connect(self.hello())
        except CloudUnavailable as exc:
            log.warning("%s; will retry per window", exc)
        host, port = parse_addr(self.cfg.listen)
        self._server = await asyncio.start_server(self._serve_auditor, host, port, limit=8 * 1024 * 1024)
        return self._server.sockets[0].getsockname()[:2]

    async def drain(self, timeout: float | None = None) -> None:
        await self.pipeline.drain(timeout)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            for w in list(self._conn_writers):
                w.close()
            await self._server.wait_closed()
        if self.pipeline is not None:
            await self.pipeline.stop()
            self.metrics.gauge("max_intake_queue", self.pipeline.max_intake)
            self.metrics.gauge("max_stage_queue", max(self.pipeline.max_stage_queue))
        if self._hook_tasks:
            await asyncio.gather(*self._hook_tasks, return_exceptions=True)
        await self.transport.close()
        self.pool.shutdown(wait=False, cancel_futures=True)
        for k, v in self.client.counters.snapshot().items():
            self.metrics.gauge(f"client_{k}", v)


# -- simulated Power Auditor -------------------------------------------------


@dataclass
class AuditorStats:
    packets: int = 0
    bytes_sent: int = 0
    samples_sent: int = 0


async def run_auditor(addr: str, source, config: StreamConfig, hostname: str, packets: int | None = None,
                      speed: float = 1.0, stats: AuditorStats | None = None, stop: asyncio.Event | None = None,
                      packet_source=None) -> AuditorStats:
    """Connect to the inferencer and send one segment per interval (divided by `speed`).

    Sends follow an absolute schedule, so slow iterations do not accumulate drift.
    """
    stats = stats or AuditorStats()
    host, port = parse_addr(addr)
    _, writer = await asyncio.open_connection(host, port)
    gen = packet_source if packet_source is not None else segmenter(source, config, hostname, packets)
    interval = config.interval / speed
    t0 = time.monotonic()
    try:
        for k, pkt in enumerate(gen):
            if stop is not None and stop.is_set():
                break
            delay = t0 + k * interval - time.monotonic()
            if delay > 0:
                if stop is not None:
                    try:
                        await asyncio.wait_for(stop.wait(), delay)
                        break
                    except asyncio.TimeoutError:
                        pass
                else:
                    await asyncio.sleep(delay)
            line = encode_packet(pkt)
            writer.write(line)
            await writer.drain()
            stats.packets += 1
            stats.bytes_sent += len(line)
            stats.samples_sent += pkt.num_data_points
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except ConnectionError:
            pass
    return stats


def packet_rate_kbps(stats: AuditorStats, config: StreamConfig) -> float:
    """Steady auditor->inferencer rate in kbit/s, in simulated (not wall) time."""
    if not stats.packets:
        return 0.0
    return stats.bytes_sent * 8 / (stats.packets * config.interval) / 1000.0
