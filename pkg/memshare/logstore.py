#!/usr/bin/env python3.9
"""The segmented in-memory log and the hash index that points into it.

Definition of Liveness
======================
A record is *live* iff the index entry for its ``(app id, key)`` points exactly at
its location. Overwritten or removed records are *dead*; their bytes are reclaimed
lazily when the cleaner processes their segment. For every segment, ``live_bytes``
is the sum of the total sizes of its live records.

Synchronization
===============
   - Lookups read the index without taking a lock. Callers pin an epoch with
     ``store.epochs.guard()`` so that the segment they read cannot be reused under
     them.
   - Index writes take the lock of the index bucket the key hashes to.
   - Appends take the short head lock: bump the head offset or swap the head.
   - The free and sealed segment lists are protected by the list lock, touched at
     head swaps and at cleaning pass boundaries only.
"""
# Imports from standard library.
from collections import deque
import contextlib
import math
import threading
from typing import Callable, Final, Iterator, NamedTuple, Optional
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.epoch import EpochManager
from memshare.errors import OutOfMemory, OversizeObject
from memshare.segment import (AppId, LogLocation, object_record, ObjectRecord,
                              RecordHeader, Segment, SEGMENT_OVERHEAD, SegmentId,
                              SegmentState)


# Types
# =====

IndexKey = tuple[AppId, bytes]

#: How long a blocking append waits for the cleaner before re-checking, in seconds.
_FREE_WAIT_SECONDS: Final = 0.05
_FREE_WAIT_ROUNDS: Final = 200


class AppendResult(NamedTuple):
    """Outcome of an append: the new location and the header it replaced, if any."""

    location: LogLocation
    total_size: int
    replaced: Optional[RecordHeader]


class LookupHit(NamedTuple):
    """A successful lookup. ``previous_access`` is ``t`` before this access."""

    value: bytes
    total_size: int
    previous_access: int
    frequency: int
    location: LogLocation


class UtilizationReport(NamedTuple):
    """Live bytes against the bytes of log memory holding records."""

    live_bytes: int
    used_bytes: int
    capacity_bytes: int
    utilization: float


# Hash Index
# ==========


class HashIndex:
    """Map from ``(app id, key)`` to `LogLocation` split into locked buckets."""

    def __init__(self, bucket_count: int = 1024):
        self._buckets: list[dict[IndexKey, LogLocation]] = [{} for _ in range(bucket_count)]
        self._locks: list[threading.Lock] = [threading.Lock() for _ in range(bucket_count)]

    @property
    def bucket_count(self) -> int:
        """Number of buckets (and of bucket locks)."""
        return len(self._buckets)

    def _bucket_of(self, key: IndexKey) -> int:
        return hash(key) % len(self._buckets)

    def __len__(self) -> int:
        return sum(map(len, self._buckets))

    def get(self, key: IndexKey) -> Optional[LogLocation]:
        """Return the location of ``key`` without locking."""
        return self._buckets[self._bucket_of(key)].get(key)

    @contextlib.contextmanager
    def locked(self, key: IndexKey) -> Iterator[dict[IndexKey, LogLocation]]:
        """Hold the bucket lock of ``key`` and yield the bucket."""
        number: int = self._bucket_of(key)
        with self._locks[number]:
            yield self._buckets[number]

    def items(self) -> Iterator[tuple[IndexKey, LogLocation]]:
        """Iterate over a snapshot of all entries."""
        for bucket in self._buckets:
            yield from list(bucket.items())


# The Log
# =======


class LogStore:  # pylint: disable=too-many-instance-attributes,too-many-public-methods
    """A segmented log of records plus its hash index.

    Args:
       segment_size (:obj:`int`): bytes per segment.
       total_memory (:obj:`int`): bytes of log memory; ``total_memory //
          segment_size`` segments are allocated up front.
       free_pool_target_fraction (:obj:`float`): cleaning is wanted while fewer than
          ``max(2, ceil(fraction * segments))`` segments are free.
       hash_buckets (:obj:`int`): number of index buckets.
       blocking (:obj:`bool`): whether an append waits for the cleaner when the
          free pool is exhausted (instead of raising `OutOfMemory`).

    """

    def __init__(self, segment_size: int, total_memory: int,
                 free_pool_target_fraction: float = 0.01,
                 hash_buckets: int = 1024,
                 blocking: bool = True):
        count: int = total_memory // segment_size
        if count < 2:
            raise ValueError(f'{total_memory} bytes hold fewer than two segments '
                             f'of {segment_size} bytes')
        self.segment_size = segment_size
        self.blocking = blocking
        self.segments: list[Segment] = [Segment(SegmentId(i), segment_size)
                                        for i in range(count)]
        self.free_target: int = max(2, math.ceil(free_pool_target_fraction * count))
        self.index = HashIndex(hash_buckets)
        self.epochs = EpochManager()
        #: Called (without arguments) when an append finds no free segment.
        self.on_exhausted: Optional[Callable[[], None]] = None

        self._free: deque[SegmentId] = deque(SegmentId(i) for i in range(1, count))
        self._retired: list[SegmentId] = []
        self._head: Segment = self.segments[0]
        self._head.state = SegmentState.HEAD
        self._head_lock = threading.Lock()
        self._list_lock = threading.Lock()
        self._free_available = threading.Condition(self._list_lock)
        self._live_lock = threading.Lock()

    # Inspection
    # ----------

    @property
    def head(self) -> Segment:
        """The segment currently accepting appends."""
        return self._head

    @property
    def max_record_size(self) -> int:
        """The largest record a segment can hold."""
        return self.segment_size - SEGMENT_OVERHEAD

    def segment(self, segment_id: SegmentId) -> Segment:
        """Return a segment by id."""
        return self.segments[segment_id]

    def free_count(self) -> int:
        """Number of segments in the Free state."""
        return len(self._free)

    def needs_cleaning(self) -> bool:
        """Return True iff the free pool is below its target."""
        return self.free_count() < self.free_target

    def sealed_segments(self) -> list[Segment]:
        """Return every Sealed segment (never the head, never a segment being cleaned)."""
        with self._list_lock:
            return [s for s in self.segments if s.state is SegmentState.SEALED]

    def live_bytes(self) -> int:
        """Sum of live bytes over all segments."""
        return sum(s.live_bytes for s in self.segments)

    def live_bytes_by_app(self) -> dict[AppId, int]:
        """Live bytes per application over all segments."""
        totals: dict[AppId, int] = {}
        for seg in self.segments:
            for app, live in seg.live_by_app.items():
                if live:
                    totals[app] = totals.get(app, 0) + live
        return totals

    def location_of(self, app: AppId, key: bytes) -> Optional[LogLocation]:
        """Return where the live record of ``key`` is stored, if anywhere."""
        return self.index.get((app, key))

    def is_live(self, app: AppId, key: bytes, location: LogLocation) -> bool:
        """Return True iff the index entry of ``key`` points exactly at ``location``."""
        return self.index.get((app, key)) == location

    def audit(self) -> dict[SegmentId, int]:
        """Recompute live bytes per segment from the index by full scan.

        Every index entry is decoded and checked to name its own key, so this also
        verifies that the index only points at decodable, matching records.
        """
        live: dict[SegmentId, int] = {s.segment_id: 0 for s in self.segments}
        for (app, key), location in self.index.items():
            seg: Segment = self.segments[location.segment_id]
            header: RecordHeader = seg.header_at(location.offset)
            assert header.app_id == app and seg.key_at(location.offset, header) == key, \
                f'index entry {(app, key)} points at a foreign record {header}'
            assert location.offset + header.total_size <= seg.write_offset
            assert seg.state is not SegmentState.RETIRED, f'{seg} is still referenced'
            live[location.segment_id] += header.total_size
        return live

    def utilization_report(self) -> UtilizationReport:
        """Live bytes against the bytes of all non-free segments that hold records.

        Sealed and cleaning segments count with their full capacity, the head with
        its write offset only.
        """
        used: int = 0
        for seg in self.segments:
            if seg.state is SegmentState.HEAD:
                used += seg.write_offset
            elif seg.state in (SegmentState.SEALED, SegmentState.CLEANING):
                used += seg.capacity
        live: int = self.live_bytes()
        return UtilizationReport(live, used, len(self.segments) * self.segment_size,
                                 live / used if used else 1.0)

    # Live byte accounting
    # --------------------

    def _count_live(self, location: LogLocation, app: AppId, size: int) -> None:
        with self._live_lock:
            seg: Segment = self.segments[location.segment_id]
            seg.live_bytes += size
            seg.live_by_app[app] += size

    def _count_dead(self, location: LogLocation, app: AppId, size: int) -> None:
        with self._live_lock:
            seg: Segment = self.segments[location.segment_id]
            seg.live_bytes -= size
            seg.live_by_app[app] -= size

    # Segment lists
    # -------------

    def _take_free_segment(self) -> Segment:
        """Pop a free segment, reclaiming, cleaning or waiting if the pool is empty."""
        for _ in range(_FREE_WAIT_ROUNDS):
            self.reclaim_retired()
            with self._list_lock:
                if self._free:
                    return self.segments[self._free.popleft()]
            if self.on_exhausted is not None:
                self.on_exhausted()
                self.reclaim_retired()
                with self._list_lock:
                    if self._free:
                        return self.segments[self._free.popleft()]
            if not self.blocking:
                break
            with self._free_available:
                self._free_available.wait(timeout=_FREE_WAIT_SECONDS)
        raise OutOfMemory('free segment pool exhausted')

    def take_free_segments(self, count: int) -> list[Segment]:
        """Take up to ``count`` free segments for cleaner output, without waiting."""
        self.reclaim_retired()
        with self._list_lock:
            taken: list[Segment] = []
            while self._free and len(taken) < count:
                seg: Segment = self.segments[self._free.popleft()]
                seg.state = SegmentState.CLEANING
                taken.append(seg)
            return taken

    def mark_cleaning(self, segments: list[Segment]) -> list[Segment]:
        """Claim Sealed segments as pass inputs. Segments claimed elsewhere are skipped."""
        with self._list_lock:
            claimed: list[Segment] = []
            for seg in segments:
                if seg.state is SegmentState.SEALED:
                    seg.state = SegmentState.CLEANING
                    claimed.append(seg)
            return claimed

    def seal(self, segments: list[Segment]) -> None:
        """Mark finished cleaner outputs as Sealed."""
        with self._list_lock:
            for seg in segments:
                seg.state = SegmentState.SEALED

    def release(self, segments: list[Segment]) -> None:
        """Return unused output segments (no live records) straight to the free pool."""
        with self._free_available:
            for seg in segments:
                assert seg.live_bytes == 0, f'{seg} still holds live records'
                seg.reset()
                self._free.append(seg.segment_id)
            self._free_available.notify_all()

    def retire(self, segments: list[Segment]) -> int:
        """Retire pass inputs at the current epoch, then advance the epoch.

        Must only be called once no index entry references ``segments``.

        Return:
           The epoch the segments were tagged with.

        """
        with self._list_lock:
            epoch: int = self.epochs.current
            for seg in segments:
                seg.state = SegmentState.RETIRED
                seg.retire_epoch = epoch
                self._retired.append(seg.segment_id)
        self.epochs.advance()
        return epoch

    def try_reclaim(self, segment: Segment) -> bool:
        """Move a Retired segment to Free iff the epoch rule allows it.

        Return:
           True iff the segment is Free afterwards because of this call.

        """
        with self._free_available:
            if segment.state is not SegmentState.RETIRED:
                return False
            assert segment.retire_epoch is not None
            if not self.epochs.can_reclaim(segment.retire_epoch):
                return False
            self._retired.remove(segment.segment_id)
            segment.reset()
            self._free.append(segment.segment_id)
            self._free_available.notify_all()
            return True

    def reclaim_retired(self) -> int:
        """Try to reclaim every Retired segment. Return how many became Free."""
        with self._list_lock:
            candidates: list[Segment] = [self.segments[i] for i in self._retired]
        return sum(map(self.try_reclaim, candidates))

    # Data path
    # ---------

    def append(self, app: AppId, key: bytes, value: bytes, now: int) -> AppendResult:
        """Append a record at the head and point the index at it.

        If the record does not fit behind the head's write offset, the head is sealed
        and a free segment becomes the new head.

        Raises:
           OversizeObject: if the record is larger than a segment.
           OutOfMemory: in non-blocking mode, when no free segment can be found.

        """
        record: ObjectRecord = object_record(app, key, value, now)
        size: int = record.total_size
        if size > self.max_record_size:
            raise OversizeObject(f'record of {size} bytes exceeds segment capacity '
                                 f'{self.max_record_size}')
        payload: bytes = record.encode()
        with self._head_lock:
            if not self._head.fits(size):
                fresh: Segment = self._take_free_segment()
                with self._list_lock:
                    self._head.state = SegmentState.SEALED
                    fresh.state = SegmentState.HEAD
                    self._head = fresh
                logger.trace(f'head moved to segment {fresh.segment_id}')
            location = LogLocation(self._head.segment_id, self._head.write(payload))
            # Indexed before the head can be sealed and chosen by the cleaner.
            replaced: Optional[RecordHeader] = None
            with self.index.locked((app, record.key)) as bucket:
                old: Optional[LogLocation] = bucket.get((app, record.key))
                bucket[(app, record.key)] = location
                self._count_live(location, app, size)
                if old is not None:
                    replaced = self.segments[old.segment_id].header_at(old.offset)
                    self._count_dead(old, app, replaced.total_size)
        logger.trace(f'append app={app} key={key!r} at {location}')
        return AppendResult(location, size, replaced)

    def lookup(self, app: AppId, key: bytes, now: int) -> Optional[LookupHit]:
        """Return the value of ``key`` and record the access, or None on a miss."""
        location: Optional[LogLocation] = self.index.get((app, key))
        if location is None:
            return None
        seg: Segment = self.segments[location.segment_id]
        record: ObjectRecord = seg.record_at(location.offset)
        previous, frequency = seg.touch(location.offset, now)
        return LookupHit(record.value, record.total_size, previous, frequency + 1, location)

    def remove(self, app: AppId, key: bytes) -> Optional[RecordHeader]:
        """Drop the index entry of ``key``. Return the header of the removed record."""
        with self.index.locked((app, key)) as bucket:
            location: Optional[LogLocation] = bucket.pop((app, key), None)
            if location is None:
                return None
            header: RecordHeader = self.segments[location.segment_id].header_at(location.offset)
            self._count_dead(location, app, header.total_size)
        logger.trace(f'removed app={app} key={key!r} from {location}')
        return header

    # Cleaner primitives
    # ------------------

    def relocate(self, app: AppId, key: bytes, source: LogLocation,
                 payload: bytes, target: Segment) -> Optional[LogLocation]:
        """Copy a record into ``target`` and swing its index entry there.

        The bytes are written before the index changes, so readers see either copy.
        If the entry no longer points at ``source`` (the key was overwritten or
        removed meanwhile) the copy is left dead.

        Return:
           The new location if the index was updated, else None.

        """
        location = LogLocation(target.segment_id, target.write(payload))
        size: int = len(payload)
        with self.index.locked((app, key)) as bucket:
            if bucket.get((app, key)) != source:
                return None
            bucket[(app, key)] = location
            self._count_dead(source, app, size)
            self._count_live(location, app, size)
        return location

    def detach(self, app: AppId, key: bytes, source: LogLocation) -> bool:
        """Remove the index entry of ``key`` iff it still points at ``source``."""
        with self.index.locked((app, key)) as bucket:
            if bucket.get((app, key)) != source:
                return False
            del bucket[(app, key)]
            self._count_dead(source, app, self.segments[source.segment_id]
                             .header_at(source.offset).total_size)
            return True

    def attach(self, app: AppId, key: bytes, payload: bytes,
               target: Segment) -> Optional[LogLocation]:
        """Write a detached record into ``target`` and re-insert its index entry.

        If the key was re-inserted meanwhile, the newer record wins and the copy is
        left dead.
        """
        location = LogLocation(target.segment_id, target.write(payload))
        with self.index.locked((app, key)) as bucket:
            if (app, key) in bucket:
                return None
            bucket[(app, key)] = location
            self._count_live(location, app, len(payload))
        return location
