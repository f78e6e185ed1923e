"""Monotonic clocks. The CDM only ever asks ``now()``; tests drive a scripted one."""

from __future__ import annotations

import threading
import time


class MonotonicClock:
    def now(self) -> float:
        return time.monotonic()


class ScriptedClock:
    """Clock that only moves when told to."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("a monotonic clock cannot go backwards")
        with self._lock:
            self._now += seconds
