"""Injectable time source so rate limiting and backoff are testable.

Everything that waits (token bucket, retry backoff, scripted delays) goes
through a Clock instead of calling time.sleep directly. Tests swap in a
VirtualClock where sleep() just advances a counter, so timing behaviour can
be asserted exactly without real waiting.
"""

import threading
import time


class Clock:
    """Interface: now() in seconds (monotonic) and sleep(seconds)."""

    def now(self) -> float:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError


class MonotonicClock(Clock):
    """Real wall clock backed by time.monotonic / time.sleep."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock(Clock):
    """Deterministic clock: sleep() advances time instantly.

    Safe to share across threads; advances are atomic.
    """

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        if seconds <= 0:
            return
        with self._lock:
            self._now += seconds

    def advance(self, seconds: float) -> None:
        self.sleep(seconds)


SYSTEM_CLOCK = MonotonicClock()
