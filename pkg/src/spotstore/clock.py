"""Wall and virtual clocks.

Both expose ``now``, ``sleep``, ``sleep_until``, ``wait_until`` and ``notify``.
``VirtualClock`` advances only when every participating thread is blocked in
one of its waits, which gives deterministic multi-threaded schedules in tests.
"""

from __future__ import annotations

import contextlib
import threading
import time
from typing import Callable


class RealClock:
    def __init__(self):
        self._cond = threading.Condition()

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def sleep_until(self, t: float) -> None:
        self.sleep(t - self.now())

    def wait_until(self, predicate: Callable[[], bool], deadline: float) -> bool:
        """Block until ``predicate()`` holds or ``deadline`` passes; return the predicate."""
        with self._cond:
            while not predicate():
                remaining = deadline - self.now()
                if remaining <= 0:
                    return predicate()
                self._cond.wait(min(remaining, 0.5))
            return True

    def notify(self) -> None:
        with self._cond:
            self._cond.notify_all()

    @contextlib.contextmanager
    def participant(self):
        yield

    def register(self) -> None:
        pass

    def unregister(self) -> None:
        pass


class _Waiter:
    __slots__ = ("until", "predicate", "woken")

    def __init__(self, until, predicate):
        self.until = until
        self.predicate = predicate
        self.woken = False


class VirtualClock:
    """Discrete-event clock shared by a known set of participant threads.

    Wake-ups are accounted at the moment they are granted, so a thread that
    has been woken but not yet scheduled still counts as running.
    """

    def __init__(self, start: float = 0.0):
        self._now = start
        self._cond = threading.Condition()
        self._waiters: list[_Waiter] = []
        self._active = 0

    def now(self) -> float:
        with self._cond:
            return self._now

    def advance(self, seconds: float) -> None:
        """Move time forward from outside any participant (test driver use)."""
        with self._cond:
            self._now += seconds
            self._wake(lambda w: w.until <= self._now)

    @contextlib.contextmanager
    def participant(self):
        self.register()
        try:
            yield
        finally:
            self.unregister()

    def register(self) -> None:
        with self._cond:
            self._active += 1

    def unregister(self) -> None:
        with self._cond:
            self._active -= 1
            self._maybe_advance()

    def _wake(self, select) -> None:
        for w in self._waiters:
            if not w.woken and select(w):
                w.woken = True
                self._active += 1
        self._cond.notify_all()

    def _maybe_advance(self) -> None:
        if self._active > 0:
            return
        pending = [w.until for w in self._waiters if not w.woken]
        if pending:
            self._now = max(self._now, min(pending))
            self._wake(lambda w: w.until <= self._now)

    def _block(self, until: float, predicate: Callable[[], bool] | None) -> None:
        # caller holds self._cond and is a registered participant
        w = _Waiter(until, predicate)
        self._waiters.append(w)
        self._active -= 1
        self._maybe_advance()
        while not w.woken:
            self._cond.wait()
        self._waiters.remove(w)

    def sleep(self, seconds: float) -> None:
        with self._cond:
            target = self._now + max(seconds, 0.0)
        self.sleep_until(target)

    def sleep_until(self, t: float) -> None:
        with self._cond:
            if t <= self._now:
                return
            if self._active == 0:
                # not a registered participant: behave as a plain driver
                self._now = t
                self._wake(lambda w: w.until <= self._now)
                return
            self._block(t, None)

    def wait_until(self, predicate: Callable[[], bool], deadline: float) -> bool:
        with self._cond:
            if predicate():
                return True
            if deadline <= self._now:
                return False
            if self._active == 0:
                self._now = deadline
                self._wake(lambda w: w.until <= self._now)
                return predicate()
            self._block(deadline, predicate)
            return predicate()

    def notify(self) -> None:
        with self._cond:
            self._wake(lambda w: w.predicate is not None and w.predicate())
