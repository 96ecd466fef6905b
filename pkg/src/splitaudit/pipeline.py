"""Staged asyncio pipeline with per-key ordering and drop-oldest backpressure.

Each item walks through the stages in order; different items occupy
different stages at the same time, so steady-state throughput is set by
the slowest stage. Completions for one key (hostname) are released in
admission order even when several workers per stage let items overtake.
"""

from __future__ import annotations

import asyncio
import inspect
import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable


@dataclass
class Stage:
    name: str
    fn: Callable  # fn(item) -> item; coroutine functions are awaited, others run in the executor
    workers: int = 1


@dataclass
class Completion:
    key: Any
    seq: int
    item: Any
    error: BaseException | None = None
    stage_times: dict = field(default_factory=dict)
    admitted_at: float = 0.0
    finished_at: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class _Ticket:
    key: Any
    seq: int
    item: Any
    admitted_at: float
    stage_times: dict = field(default_factory=dict)
    error: BaseException | None = None


class Pipeline:
    """Run items through `stages`.

    `depth` bounds both the per-key intake queue and every inter-stage
    queue. When a key's intake queue is full the oldest waiting item is
    discarded and `on_drop(key, item)` is called. With ``serial=True`` one
    item is in flight at a time, which degenerates to plain sequential
    processing.
    """

    def __init__(self, stages: list[Stage], depth: int = 8, on_complete=None, on_drop=None,
                 serial: bool = False, executor=None):
        if depth < 1:
            raise ValueError("queue depth must be >= 1")
        if not stages or any(s.workers < 1 for s in stages):
            raise ValueError("need at least one stage with >= 1 worker each")
        self.stages = stages
        self.depth = depth
        self.serial = serial
        self.on_complete = on_complete
        self.on_drop = on_drop
        self.executor = executor
        self.admitted = 0
        self.completed = 0
        self.dropped = 0
        self.max_intake = 0
        self.max_stage_queue = [0] * len(stages)
        self._intake: dict[Any, deque] = {}
        self._rr: deque = deque()
        self._wake = asyncio.Event()
        self._queues = [asyncio.Queue(maxsize=depth) for _ in stages]
        self._seq: dict[Any, itertools.count] = {}
        self._next: dict[Any, int] = {}
        self._pending: dict[Any, dict[int, Completion]] = {}
        self._idle = asyncio.Event()
        self._idle.set()
        self._in_flight = 0
        self._serial_gate = asyncio.Semaphore(1)
        self._tasks: list[asyncio.Task] = []

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._feeder()))
        for i, stage in enumerate(self.stages):
            for _ in range(stage.workers):
                self._tasks.append(loop.create_task(self._worker(i)))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()

    async def drain(self, timeout: float | None = None) -> None:
        """Wait until every submitted item has completed or been dropped."""

        async def _wait():
            while self.queued or self._in_flight:
                self._idle.clear()
                await self._idle.wait()

        await asyncio.wait_for(_wait(), timeout)

    @property
    def queued(self) -> int:
        return sum(len(q) for q in self._intake.values())

    # -- intake --------------------------------------------------------------

    def submit(self, key, item) -> None:
        q = self._intake.get(key)
        if q is None:
            q = self._intake[key] = deque()
            self._rr.append(key)
        if len(q) >= self.depth:
            old = q.popleft()
            self.dropped += 1
            if self.on_drop is not None:
                self.on_drop(key, old)
        q.append(item)
        self.max_intake = max(self.max_intake, len(q))
        self._wake.set()

    def _next_waiting(self):
        for _ in range(len(self._rr)):
            key = self._rr[0]
            self._rr.rotate(-1)
            if self._intake[key]:
                return key, self._intake[key].popleft()
        return None

    async def _feeder(self) -> None:
        while True:
            nxt = self._next_waiting()
            if nxt is None:
                self._wake.clear()
                self._idle.set()
                await self._wake.wait()
                continue
            key, item = nxt
            if self.serial:
                await self._serial_gate.acquire()
            seq = next(self._seq.setdefault(key, itertools.count()))
            self._next.setdefault(key, 0)
            self._in_flight += 1
            self.admitted += 1
            await self._put(0, _Ticket(key, seq, item, time.monotonic()))

    async def _put(self, i: int, ticket: _Ticket) -> None:
        q = self._queues[i]
        await q.put(ticket)
        self.max_stage_queue[i] = max(self.max_stage_queue[i], q.qsize())

    # -- stages --------------------------------------------------------------

    async def _run(self, stage: Stage, item):
        if inspect.iscoroutinefunction(stage.fn):
            return await stage.fn(item)
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.executor, stage.fn, item)

    async def _worker(self, i: int) -> None:
        stage = self.stages[i]
        q = self._queues[i]
        while True:
            ticket = await q.get()
            if ticket.error is None:
                t0 = time.perf_counter()
                try:
                    ticket.item = await self._run(stage, ticket.item)
                except asyncio.CancelledError:
                    raise
                except Exception as exc:
                    ticket.error = exc
                ticket.stage_times[stage.name] = ticket.stage_times.get(stage.name, 0.0) + time.perf_counter() - t0
            if ticket.error is not None or i + 1 == len(self.stages):
                self._finish(ticket)
            else:
                await self._put(i + 1, ticket)

    def _finish(self, ticket: _Ticket) -> None:
        done = Completion(ticket.key, ticket.seq, ticket.item, ticket.error, ticket.stage_times,
                          ticket.admitted_at, time.monotonic())
        pending = self._pending.setdefault(ticket.key, {})
        pending[ticket.seq] = done
        while self._next[ticket.key] in pending:
            c = pending.pop(self._next[ticket.key])
            self._next[ticket.key] += 1
            self.completed += 1
            self._in_flight -= 1
            if self.on_complete is not None:
                try:
                    self.on_complete(c)
                except Exception:  # a broken sink must not stall the pipeline
                    pass
            if self.serial:
                self._serial_gate.release()
        if not self._in_flight and not self.queued:
            self._idle.set()


async def pipeline_scheduler(stages: list[Stage], instances, depth: int = 8, serial: bool = False,
                             executor=None) -> list[Completion]:
    """Push (key, item) pairs through `stages`; returns completions in emission order."""
    out: list[Completion] = []
    pipe = Pipeline(stages, depth=depth, on_complete=out.append, serial=serial, executor=executor)
    pipe.start()
    try:
        for key, item in instances:
            pipe.submit(key, item)
            # let the feeder admit work so a long instance list is not dropped wholesale
            while pipe.queued >= depth:
                await asyncio.sleep(0.001)
        await pipe.drain()
    finally:
        await pipe.stop()
    return out
