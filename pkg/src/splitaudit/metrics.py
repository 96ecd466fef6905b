"""Counters and gauges exported as ``name value timestamp`` lines."""

from __future__ import annotations

import threading
import time


class Metrics:
    def __init__(self):
        self._lock = threading.Lock()
        self._counters: dict[str, float] = {}
        self._gauges: dict[str, float] = {}

    def inc(self, name: str, n: float = 1) -> None:
        with self._lock:
            self._counters[name] = self._counters.get(name, 0) + n

    def gauge(self, name: str, value: float) -> None:
        with self._lock:
            self._gauges[name] = value

    def gauge_max(self, name: str, value: float) -> None:
        with self._lock:
            self._gauges[name] = max(self._gauges.get(name, value), value)

    def get(self, name: str, default: float = 0) -> float:
        with self._lock:
            if name in self._counters:
                return self._counters[name]
            return self._gauges.get(name, default)

    def snapshot(self) -> dict:
        with self._lock:
            return {**self._counters, **self._gauges}

    def render(self, now: float | None = None) -> str:
        ts = int(now if now is not None else time.time())
        snap = self.snapshot()
        return "".join(f"{k} {_fmt(v)} {ts}\n" for k, v in sorted(snap.items()))

    def write(self, path) -> None:
        with open(path, "a") as fh:
            fh.write(self.render())


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.6g}"
