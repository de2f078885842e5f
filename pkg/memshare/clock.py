#!/usr/bin/env python3.9
"""Clocks that stamp record accesses.

All times are integer microseconds. The simulator clock is a logical counter that
never repeats a value, so LRU ranks are unique and every run is deterministic. The
server clock follows the monotonic wall clock at millisecond granularity.
"""
# Imports from standard library.
import threading
import time
from typing import Optional, Protocol


class Clock(Protocol):  # pylint: disable=too-few-public-methods
    """Anything that can hand out the current time for a request."""

    def now(self) -> int:
        """Return the time of the last request without advancing the clock."""

    def advance(self, to: Optional[int] = None) -> int:
        """Stamp a new request and return its time."""


class LogicalClock:
    """A 64-bit logical counter.

    ``advance(to)`` returns ``max(previous + 1, to)``, so the clock follows trace
    timestamps when they are given and still ticks strictly between requests that
    share a timestamp.
    """

    def __init__(self, start: int = 0):
        self._now: int = start

    def now(self) -> int:
        """Return the time of the last request."""
        return self._now

    def advance(self, to: Optional[int] = None) -> int:
        """Advance by at least one and at least up to ``to``."""
        self._now = max(self._now + 1, to if to is not None else 0)
        return self._now


class WallClock:
    """Coarse monotonic time in microseconds, rounded to whole milliseconds."""

    def __init__(self) -> None:
        self._origin: float = time.monotonic()
        self._last: int = 0
        self._lock = threading.Lock()

    def now(self) -> int:
        """Return the coarse current time."""
        return self._last

    def advance(self, to: Optional[int] = None) -> int:
        """Read the wall clock. ``to`` is ignored; wall time cannot be steered."""
        elapsed_ms: int = int((time.monotonic() - self._origin) * 1000)
        with self._lock:
            self._last = max(self._last, elapsed_ms * 1000)
            return self._last
