#!/usr/bin/env python3.9
"""Epoch-gated reuse of cleaned segments.

Every request is tagged at its start with the global epoch. A cleaning pass first
removes all index references into its input segments, then tags those segments
with the global epoch and increments it. A segment tagged with epoch ``e`` may be
reused only once every in-flight request started at an epoch strictly greater than
``e``: such requests cannot hold a location that points into the segment.
"""
# Imports from standard library.
from collections import Counter
import contextlib
import threading
from typing import Iterator, Optional
# Imports from third-party modules.
from loguru import logger


class EpochManager:
    """Global epoch counter plus a registry of in-flight request epochs."""

    def __init__(self, start: int = 0):
        self._epoch: int = start
        self._in_flight: Counter[int] = Counter()
        self._lock = threading.Lock()

    @property
    def current(self) -> int:
        """The global epoch new requests are tagged with."""
        return self._epoch

    def enter(self) -> int:
        """Register a request and return the epoch it is pinned to."""
        with self._lock:
            epoch: int = self._epoch
            self._in_flight[epoch] += 1
            return epoch

    def exit(self, epoch: int) -> None:
        """Unregister a request previously registered with `enter`."""
        with self._lock:
            self._in_flight[epoch] -= 1
            if self._in_flight[epoch] <= 0:
                del self._in_flight[epoch]

    @contextlib.contextmanager
    def guard(self) -> Iterator[int]:
        """Pin the current epoch for the duration of a ``with`` block."""
        epoch: int = self.enter()
        try:
            yield epoch
        finally:
            self.exit(epoch)

    def advance(self) -> int:
        """Increment the global epoch. Return the epoch that was just closed."""
        with self._lock:
            closed: int = self._epoch
            self._epoch += 1
        logger.trace(f'epoch advanced to {closed + 1}')
        return closed

    def oldest_in_flight(self) -> Optional[int]:
        """Return the smallest epoch of any in-flight request, or None if idle."""
        with self._lock:
            return min(self._in_flight) if self._in_flight else None

    def in_flight(self) -> int:
        """Return the number of requests currently registered."""
        with self._lock:
            return sum(self._in_flight.values())

    def can_reclaim(self, retire_epoch: int) -> bool:
        """Return True iff every in-flight request began after ``retire_epoch``."""
        oldest: Optional[int] = self.oldest_in_flight()
        return oldest is None or oldest > retire_epoch
