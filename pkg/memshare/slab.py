#!/usr/bin/env python3.9
"""Memcached-style slab allocation: the baselines the log is compared against.

Slab Classes
============
Memory is handed out in slabs (1 MiB by default). A slab belongs to one class for
good and is cut into chunks of the class's size; class sizes are ``64 * 2**i`` bytes
up to the slab size. An item goes into the smallest class whose chunk holds it, so
a 56 B item wastes 8 B of a 64 B chunk and a 576 B item wastes 448 B of a 1 KiB
chunk. Slabs are never moved between classes.

Modes
=====
   - *Partitioned*: every application has a memory cap counted in whole slabs and
     its own LRU queue per class. An application only ever evicts its own items.
   - *Greedy shared*: one LRU queue per class for everyone. A SET evicts the tail
     of its class's queue, whoever owns it.
"""
# Imports from standard library.
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Final, NamedTuple, Optional, Union
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.clock import Clock, LogicalClock
from memshare.config import EngineConfig, MIB
from memshare.engine import AppStats, hit_rate, MetricsRecorder, Miss, StatsSnapshot
from memshare.errors import OutOfMemory, OversizeObject, UnknownApp
from memshare.segment import AppId, RECORD_HEADER

#: Smallest chunk size.
MIN_CHUNK: Final = 64
#: Default slab size.
SLAB_SIZE: Final = MIB
#: Item header bytes; the same as a log record's so both engines store equal sizes.
ITEM_HEADER: Final = RECORD_HEADER

PARTITIONED: Final = 'partitioned'
GREEDY: Final = 'greedy'

QueueKey = Union[int, tuple[AppId, int]]


# Slab Classes
# ============


def item_size(key: bytes, value: bytes) -> int:
    """Return the bytes an item occupies before chunk rounding."""
    return ITEM_HEADER + len(key) + len(value)


def chunk_sizes(slab_size: int = SLAB_SIZE) -> list[int]:
    """Return every class's chunk size, smallest first."""
    sizes: list[int] = []
    size: int = MIN_CHUNK
    while size <= slab_size:
        sizes.append(size)
        size *= 2
    return sizes


def class_for_size(size: int, slab_size: int = SLAB_SIZE) -> int:
    """Return the chunk size of the smallest class that holds ``size`` bytes.

    Args:
       size (:obj:`int`): the total item size, header included.
       slab_size (:obj:`int`): bytes per slab; also the largest chunk.

    Raises:
       OversizeObject: if ``size`` exceeds the slab size.

    """
    if size > slab_size:
        raise OversizeObject(f'item of {size} bytes exceeds the slab size {slab_size}')
    chunk: int = MIN_CHUNK
    while chunk < size:
        chunk *= 2
    return chunk


class SlabUtilization(NamedTuple):
    """Memory accounting of a slab cache."""

    live_bytes: int
    allocated_bytes: int
    slab_bytes: int
    fragmentation: float
    utilization: float


@dataclass
class SlabQueue:
    """The chunks of one class (per application in partitioned mode) and their LRU order."""

    chunk_size: int
    chunks: int = 0
    items: 'OrderedDict[tuple[AppId, bytes], bytes]' = field(default_factory=OrderedDict)

    @property
    def free_chunks(self) -> int:
        """Chunks not holding an item."""
        return self.chunks - len(self.items)


# The Slab Cache
# ==============


class SlabCache:  # pylint: disable=too-many-instance-attributes
    """A slab allocator with LRU eviction in partitioned or greedy shared mode.

    Args:
       memory_bytes (:obj:`int`): total slab memory.
       mode (:obj:`str`): ``partitioned`` or ``greedy``.
       app_caps (:obj:`dict[AppId, int]`): per-application memory caps, used in
          partitioned mode only.
       slab_size (:obj:`int`)

    """

    def __init__(self, memory_bytes: int, mode: str = GREEDY,
                 app_caps: Optional[dict[AppId, int]] = None, slab_size: int = SLAB_SIZE):
        if mode not in (PARTITIONED, GREEDY):
            raise ValueError(f'Encountered unknown slab mode {mode!r}')
        if mode == PARTITIONED and not app_caps:
            raise ValueError('partitioned mode needs per-application caps')
        self.memory_bytes = memory_bytes
        self.mode = mode
        self.slab_size = slab_size
        self.app_caps: dict[AppId, int] = dict(app_caps or {})
        self.queues: dict[QueueKey, SlabQueue] = {}
        self.slabs_by_app: dict[AppId, int] = {app: 0 for app in self.app_caps}
        self.slabs_by_class: dict[int, int] = {size: 0 for size in chunk_sizes(slab_size)}
        self.evictions: dict[AppId, int] = {}
        self._where: dict[tuple[AppId, bytes], QueueKey] = {}
        self._live: dict[AppId, int] = {}

    @property
    def slab_count(self) -> int:
        """Slabs allocated so far."""
        return sum(self.slabs_by_class.values())

    def _queue_key(self, app: AppId, chunk: int) -> QueueKey:
        return (app, chunk) if self.mode == PARTITIONED else chunk

    def _can_allocate(self, app: AppId) -> bool:
        if (self.slab_count + 1) * self.slab_size > self.memory_bytes:
            return False
        if self.mode == PARTITIONED:
            return (self.slabs_by_app[app] + 1) * self.slab_size <= self.app_caps[app]
        return True

    def _allocate(self, app: AppId, queue: SlabQueue) -> None:
        queue.chunks += self.slab_size // queue.chunk_size
        self.slabs_by_class[queue.chunk_size] += 1
        self.slabs_by_app[app] = self.slabs_by_app.get(app, 0) + 1
        logger.trace(f'slab of class {queue.chunk_size} allocated for app {app}')

    def _drop(self, app: AppId, key: bytes) -> Optional[bytes]:
        where: Optional[QueueKey] = self._where.pop((app, key), None)
        if where is None:
            return None
        value: bytes = self.queues[where].items.pop((app, key))
        self._live[app] -= item_size(key, value)
        return value

    def slab_set(self, app: AppId, key: bytes, value: bytes) -> bool:
        """Store an item, evicting from the tail of its queue if no chunk is free.

        Return:
           False iff the item could not be stored: no chunk of its class can be
           freed or allocated for the application.

        Raises:
           OversizeObject: if the item exceeds the slab size.
           OutOfMemory: if in partitioned mode the item's chunk exceeds the
              application's cap.
           UnknownApp: in partitioned mode, for applications without a cap.

        """
        chunk: int = class_for_size(item_size(key, value), self.slab_size)
        if self.mode == PARTITIONED:
            if app not in self.app_caps:
                raise UnknownApp(f'unknown application {app}')
            if self.app_caps[app] < self.slab_size:
                raise OutOfMemory(f'app {app} cap {self.app_caps[app]} cannot hold one slab '
                                  f'for a {chunk} B chunk')
        self._drop(app, key)
        queue_key: QueueKey = self._queue_key(app, chunk)
        queue: SlabQueue = self.queues.setdefault(queue_key, SlabQueue(chunk))
        if queue.free_chunks <= 0:
            if self._can_allocate(app):
                self._allocate(app, queue)
            elif queue.items:
                (victim_app, victim_key), victim = queue.items.popitem(last=False)
                self._where.pop((victim_app, victim_key))
                self._live[victim_app] -= item_size(victim_key, victim)
                self.evictions[victim_app] = self.evictions.get(victim_app, 0) + 1
            else:
                return False
        queue.items[(app, key)] = value
        self._where[(app, key)] = queue_key
        self._live[app] = self._live.get(app, 0) + item_size(key, value)
        return True

    def slab_get(self, app: AppId, key: bytes) -> Optional[bytes]:
        """Return the value of an item and move it to the head of its queue."""
        where: Optional[QueueKey] = self._where.get((app, key))
        if where is None:
            return None
        queue: SlabQueue = self.queues[where]
        queue.items.move_to_end((app, key))
        return queue.items[(app, key)]

    def slab_delete(self, app: AppId, key: bytes) -> bool:
        """Delete an item. Return True iff it was present."""
        return self._drop(app, key) is not None

    def live_bytes_by_app(self) -> dict[AppId, int]:
        """Item bytes stored per application."""
        return {app: live for app, live in sorted(self._live.items())}

    def utilization_report(self) -> SlabUtilization:
        """Return live bytes against occupied chunk bytes and against allocated slabs.

        ``fragmentation`` is ``1 - live / occupied chunk bytes``; ``utilization`` is
        ``live / allocated slab bytes``.
        """
        live: int = sum(self._live.values())
        occupied: int = sum(q.chunk_size * len(q.items) for q in self.queues.values())
        slab_bytes: int = self.slab_count * self.slab_size
        return SlabUtilization(live, occupied, slab_bytes,
                               1.0 - live / occupied if occupied else 0.0,
                               live / slab_bytes if slab_bytes else 0.0)


# The Engine Surface
# ==================


def slab_caps(config: EngineConfig) -> dict[AppId, int]:
    """Per-application caps of a partitioned slab cache: each app's private memory.

    Applications without explicit private memory split the rest equally, whatever
    sharing policy the configuration names.
    """
    partitioned: EngineConfig = replace(config, policy='partitioned')
    return {app: partitioned.private_mem(app) for app in sorted(config.apps)}


@dataclass
class SlabEngine:
    """`SlabCache` behind the GET/SET/DELETE/STATS surface of the Memshare engine."""

    config: EngineConfig
    cache: SlabCache
    clock: Clock = field(default_factory=LogicalClock)
    metrics: MetricsRecorder = field(init=False)

    def __post_init__(self) -> None:
        caps: dict[AppId, int] = self.cache.app_caps
        self.metrics = MetricsRecorder(list(self.config.apps), self.config.metrics_window_us,
                                       self.cache.live_bytes_by_app,
                                       lambda: dict(caps), lambda window, now: 0.0)

    @classmethod
    def from_config(cls, config: EngineConfig, clock: Optional[Clock] = None) -> 'SlabEngine':
        """Build a slab engine; ``config.engine`` selects the mode."""
        mode: str = PARTITIONED if config.engine == 'slab_partitioned' else GREEDY
        cache = SlabCache(config.total_memory_bytes, mode,
                          slab_caps(config) if mode == PARTITIONED else None,
                          config.segment_size_bytes)
        logger.info(f'slab engine mode={mode} slab_size={config.segment_size_bytes}')
        return cls(config, cache, clock or LogicalClock())

    def _check(self, app: AppId) -> None:
        if app not in self.config.apps:
            raise UnknownApp(f'unknown application {app}')

    def get(self, app: AppId, key: bytes, now: Optional[int] = None) -> Union[bytes, Miss]:
        """Return the value of ``key`` or a `Miss` (slab caches have no shadow queues)."""
        self._check(app)
        self.clock.advance(now)
        value: Optional[bytes] = self.cache.slab_get(app, key)
        self.metrics.record_get(app, value is not None)
        return value if value is not None else Miss(False)

    def set(self, app: AppId, key: bytes, value: bytes, now: Optional[int] = None) -> bool:
        """Store ``value``. Return False if the slab cache had no room for it."""
        self._check(app)
        self.clock.advance(now)
        self.metrics.record_set(app)
        return self.cache.slab_set(app, key, value)

    def delete(self, app: AppId, key: bytes, now: Optional[int] = None) -> bool:
        """Delete ``key``. Return True iff it was present."""
        self._check(app)
        self.clock.advance(now)
        self.metrics.record_delete(app)
        return self.cache.slab_delete(app, key)

    def tick(self, now: Optional[int] = None) -> None:
        """Roll metric windows over; slab caches have no policy work."""
        self.metrics.observe(self.clock.now() if now is None else now)

    def finish(self, now: Optional[int] = None) -> None:
        """Close the last, possibly partial, metrics window."""
        self.metrics.flush(self.clock.now() if now is None else now)

    def stats(self, baseline: Optional[StatsSnapshot] = None) -> StatsSnapshot:
        """Return a snapshot shaped like the Memshare engine's."""
        live: dict[AppId, int] = self.cache.live_bytes_by_app()
        apps: dict[AppId, AppStats] = {}
        for app in sorted(self.config.apps):
            counters = self.metrics.counters[app]
            cap: int = self.cache.app_caps.get(app, 0)
            apps[app] = AppStats(app, counters.gets, counters.hits, counters.misses,
                                 hit_rate(counters.hits, counters.gets), 0,
                                 live.get(app, 0), cap, private_mem=cap,
                                 evicted_items=self.cache.evictions.get(app, 0))
        gets: int = sum(a.gets for a in apps.values())
        hits: int = sum(a.hits for a in apps.values())
        free_slabs: int = (self.cache.memory_bytes // self.cache.slab_size
                           - self.cache.slab_count)
        snapshot = StatsSnapshot(self.clock.now(), apps, hit_rate(hits, gets), gets, hits,
                                 0.0, self.cache.utilization_report().utilization,
                                 free_slabs, self.config.total_memory_bytes)
        return snapshot.against(baseline) if baseline is not None else snapshot


if __name__ == '__main__':
    logger.info('Items go to the smallest chunk class that holds them.')
    for size in (56, 64, 65, 576):
        logger.info(f'>>> class_for_size({size})')
        logger.info(class_for_size(size))
