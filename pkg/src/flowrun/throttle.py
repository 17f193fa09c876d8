"""Per-container bandwidth limiter."""

from __future__ import annotations

import threading
from typing import Optional


class RequestTooLarge(ValueError):
    pass


class TokenBucket:
    """Token bucket in bits with reservation semantics.

    ``acquire`` never fails for ``bits <= burst``: if the bucket is short it
    books the deficit against future refill and returns how long the caller
    must wait before the bits may leave. Later callers queue behind earlier
    reservations, so releases stay within ``burst + rate * window``.
    """

    def __init__(self, rate_bps: float, burst_bits: float, level: float = 0.0, now: float = 0.0,
                 record: bool = False):
        if rate_bps <= 0 or burst_bits <= 0:
            raise ValueError("rate and burst must be positive")
        self.rate = float(rate_bps)
        self.burst = float(burst_bits)
        self.level = min(float(level), self.burst)
        self.last_refill = float(now)
        self._lock = threading.Lock()
        # (release time, bits) pairs when recording is on
        self.trace: Optional[list[tuple[float, float]]] = [] if record else None

    def _refill(self, now: float) -> None:
        if now > self.last_refill:
            self.level = min(self.burst, self.level + self.rate * (now - self.last_refill))
            self.last_refill = now

    def acquire(self, bits: float, now: float) -> float:
        """Debit ``bits`` and return the wait (seconds) before they may be sent."""
        if bits > self.burst:
            raise RequestTooLarge(f"{bits} bits exceeds burst {self.burst}")
        if bits < 0:
            raise ValueError("bits must be non-negative")
        with self._lock:
            self._refill(now)
            if self.last_refill <= now and self.level >= bits:
                self.level -= bits
                release = now
            else:
                deficit = bits - self.level
                self.level = 0.0
                self.last_refill = max(self.last_refill, now) + deficit / self.rate
                release = self.last_refill
            if self.trace is not None:
                self.trace.append((release, bits))
            return release - now

    def available(self, now: float) -> float:
        with self._lock:
            if now <= self.last_refill:
                return self.level
            return min(self.burst, self.level + self.rate * (now - self.last_refill))


def throttle_acquire(tb: TokenBucket, bits: float, now: float) -> float:
    return tb.acquire(bits, now)
