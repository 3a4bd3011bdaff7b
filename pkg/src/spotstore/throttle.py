"""Byte-rate limiting for datanode payload traffic."""

from __future__ import annotations

import threading
import time


class TokenBucket:
    """Token bucket that lets the balance go negative and sleeps off the debt.

    Callers are serialized while they sleep, so concurrent transfers complete
    one after another at ``rate`` instead of all finishing late together.
    ``burst`` bounds how many bytes may pass without waiting after an idle period.
    """

    def __init__(self, rate: float, burst: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be > 0")
        self.rate = float(rate)
        self.burst = float(burst) if burst is not None else self.rate * 0.02
        self._clock = clock
        self._sleep = sleep
        self._tokens = 0.0
        self._stamp = clock()
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.burst, self._tokens + (now - self._stamp) * self.rate)
        self._stamp = now

    def consume(self, n: int) -> float:
        """Take ``n`` tokens, blocking until the bucket has paid them back. Returns seconds waited."""
        if n <= 0:
            return 0.0
        with self._lock:
            self._refill()
            self._tokens -= n
            wait = -self._tokens / self.rate if self._tokens < 0 else 0.0
            if wait > 0:
                self._sleep(wait)
                self._refill()
            return wait


class Unlimited:
    rate = None

    def consume(self, n: int) -> float:
        return 0.0


def make_bucket(rate: float | None):
    return TokenBucket(rate) if rate else Unlimited()
