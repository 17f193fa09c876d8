"""Deterministic discrete-event scheduler.

All timing in a simulated run (compute, throttle waits, cold starts, TTL
sweeps) goes through one :class:`Scheduler`. Callbacks fire in
(time, insertion order), so a run with a fixed seed is reproducible
bit-for-bit.

Processes are plain generators. A process yields either a delay in seconds
or an :class:`Event` to wait on; the value passed to ``Event.fire`` becomes
the result of the ``yield``.
"""

from __future__ import annotations

import heapq
import itertools
import time
from typing import Any, Callable, Generator, Optional

# Resolution used when comparing virtual timestamps.
TICK = 1e-6


class Timer:
    __slots__ = ("time", "fn", "args", "cancelled")

    def __init__(self, t: float, fn: Callable, args: tuple):
        self.time = t
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Event:
    """One-shot event that processes and callbacks can wait on."""

    def __init__(self, sched: "Scheduler"):
        self._sched = sched
        self._callbacks: list[Callable[[Any], None]] = []
        self.fired = False
        self.value: Any = None

    def subscribe(self, cb: Callable[[Any], None]) -> None:
        if self.fired:
            self._sched.call_at(self._sched.now, cb, self.value)
        else:
            self._callbacks.append(cb)

    def fire(self, value: Any = None) -> None:
        if self.fired:
            return
        self.fired = True
        self.value = value
        for cb in self._callbacks:
            self._sched.call_at(self._sched.now, cb, value)
        self._callbacks.clear()


class Process:
    def __init__(self, sched: "Scheduler", gen: Generator, name: str = ""):
        self._sched = sched
        self._gen = gen
        self.name = name
        self.done = False
        self.killed = False
        self.result: Any = None
        self.finished = Event(sched)
        sched.call_at(sched.now, self._step, None)

    def kill(self) -> None:
        if self.done:
            return
        self.killed = True
        self.done = True
        self._gen.close()
        self.finished.fire(None)

    def _step(self, value: Any) -> None:
        if self.done:
            return
        try:
            item = self._gen.send(value)
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            self.finished.fire(stop.value)
            return
        if isinstance(item, Event):
            item.subscribe(self._step)
        else:
            delay = float(item) if item is not None else 0.0
            self._sched.call_later(max(0.0, delay), self._step, None)


class Scheduler:
    """Event queue with a virtual clock.

    With ``realtime=True`` the scheduler sleeps so that virtual time tracks
    wall-clock time (scaled by ``speed``); used only for smoke runs.
    """

    def __init__(self, start: float = 0.0, realtime: bool = False, speed: float = 1.0):
        self.now = float(start)
        self.realtime = realtime
        self.speed = speed
        self._queue: list[tuple[float, int, Timer]] = []
        self._seq = itertools.count()
        self._wall0: Optional[float] = None
        self.events_run = 0

    def clock(self) -> float:
        return self.now

    def call_at(self, t: float, fn: Callable, *args) -> Timer:
        if t < self.now:
            t = self.now
        timer = Timer(t, fn, args)
        heapq.heappush(self._queue, (t, next(self._seq), timer))
        return timer

    def call_later(self, delay: float, fn: Callable, *args) -> Timer:
        return self.call_at(self.now + delay, fn, *args)

    def spawn(self, gen: Generator, name: str = "") -> Process:
        return Process(self, gen, name)

    def event(self) -> Event:
        return Event(self)

    def pending(self) -> int:
        return sum(1 for _, _, timer in self._queue if not timer.cancelled)

    def peek(self) -> Optional[float]:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def run(self, until: Optional[float] = None, stop: Optional[Callable[[], bool]] = None) -> float:
        """Run events in order; return the clock when the loop exits.

        Stops when the queue is empty, when the next event lies beyond
        ``until`` (the clock is then advanced to ``until``), or when
        ``stop()`` becomes true after an event.
        """
        if self.realtime and self._wall0 is None:
            self._wall0 = time.monotonic() - self.now / self.speed
        while True:
            nxt = self.peek()
            if nxt is None:
                break
            if until is not None and nxt > until:
                self.now = max(self.now, until)
                break
            t, _, timer = heapq.heappop(self._queue)
            if self.realtime:
                lag = t / self.speed - (time.monotonic() - self._wall0)
                if lag > 0:
                    time.sleep(lag)
            self.now = t
            self.events_run += 1
            timer.fn(*timer.args)
            if stop is not None and stop():
                break
        return self.now
