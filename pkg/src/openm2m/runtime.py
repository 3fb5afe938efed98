"""Clock and timer abstractions.

Components that need time (store stamps, broker retries, presence deadlines,
session expiry) take a clock and a scheduler so deployments run on wall time
while the simulation harness substitutes a virtual clock and fires timers
deterministically.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from datetime import datetime, timedelta, timezone


def format_timestamp(dt: datetime) -> str:
    """ISO-8601 with millisecond precision and a numeric offset."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    base = dt.strftime("%Y-%m-%dT%H:%M:%S")
    millis = dt.microsecond // 1000
    offset = dt.utcoffset() or timedelta(0)
    total = int(offset.total_seconds())
    sign = "+" if total >= 0 else "-"
    total = abs(total)
    return f"{base}.{millis:03d}{sign}{total // 3600:02d}:{(total % 3600) // 60:02d}"


def parse_timestamp(text: str) -> datetime:
    """Inverse of format_timestamp; accepts any fractional-second width."""
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%f%z")


class Clock:
    """Wall-clock time source."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def monotonic(self) -> float:
        return time.monotonic()

    def timestamp(self) -> str:
        return format_timestamp(self.now())


SystemClock = Clock


class Scheduler:
    """Fire callbacks after a delay using real timers."""

    def __init__(self) -> None:
        self._timers: list[threading.Timer] = []
        self._lock = threading.Lock()

    def call_later(self, delay: float, fn, *args) -> threading.Timer:
        timer = threading.Timer(max(delay, 0.0), fn, args=args)
        timer.daemon = True
        with self._lock:
            self._timers = [t for t in self._timers if t.is_alive()]
            self._timers.append(timer)
        timer.start()
        return timer

    def shutdown(self) -> None:
        with self._lock:
            timers, self._timers = self._timers, []
        for t in timers:
            t.cancel()


VIRTUAL_EPOCH = datetime(2026, 1, 1, 0, 0, 0, tzinfo=timezone.utc)


class VirtualClock(Clock):
    """Clock that moves only when told to; the simulation's time source."""

    def __init__(self, start: datetime = VIRTUAL_EPOCH) -> None:
        if start.tzinfo is None:
            start = start.replace(tzinfo=timezone.utc)
        self._start = start
        self._elapsed = 0.0

    def now(self) -> datetime:
        return self._start + timedelta(seconds=self._elapsed)

    def monotonic(self) -> float:
        return self._elapsed

    def elapsed(self) -> float:
        return self._elapsed

    def _set_elapsed(self, value: float) -> None:
        if value < self._elapsed:
            raise ValueError("virtual time cannot move backwards")
        self._elapsed = value


class _VirtualTimer:
    __slots__ = ("when", "seq", "fn", "args", "cancelled")

    def __init__(self, when: float, seq: int, fn, args) -> None:
        self.when = when
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "_VirtualTimer") -> bool:
        return (self.when, self.seq) < (other.when, other.seq)


class VirtualScheduler:
    """Discrete-event timer queue over a VirtualClock.

    Callbacks run when the test or harness advances the clock past their
    due time, on the advancing thread, in (due time, submission) order.
    """

    def __init__(self, clock: VirtualClock) -> None:
        self._clock = clock
        self._heap: list[_VirtualTimer] = []
        self._seq = itertools.count()

    def call_later(self, delay: float, fn, *args) -> _VirtualTimer:
        timer = _VirtualTimer(
            self._clock.elapsed() + max(delay, 0.0), next(self._seq), fn, args
        )
        heapq.heappush(self._heap, timer)
        return timer

    def pending(self) -> int:
        return sum(1 for t in self._heap if not t.cancelled)

    def advance(self, seconds: float) -> None:
        """Move time forward, firing everything that comes due on the way."""
        target = self._clock.elapsed() + seconds
        while self._heap and self._heap[0].when <= target:
            timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self._clock._set_elapsed(max(timer.when, self._clock.elapsed()))
            timer.fn(*timer.args)
        self._clock._set_elapsed(target)

    def run_all(self, max_steps: int = 100_000) -> None:
        """Advance through every queued timer, including ones they enqueue."""
        steps = 0
        while self._heap:
            due = self._heap[0].when
            self.advance(max(due - self._clock.elapsed(), 0.0))
            steps += 1
            if steps > max_steps:
                raise RuntimeError("virtual scheduler did not quiesce")

    def shutdown(self) -> None:
        self._heap.clear()
