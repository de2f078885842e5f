#!/usr/bin/env python3.9
"""The lookaside-cache facade wiring the log, the arbiter and the cleaner together.

Data Path
=========
   - ``get`` looks the key up under an epoch guard. A hit records the access with
     the arbiter; a miss consults the application's shadow queue and, under the
     shared policy, may move one credit of sharedMem to the application.
   - ``set`` always appends, whatever the application's need: partitioning is
     enforced only by which records the cleaner keeps.
   - ``delete`` drops the index entry; the record's bytes die in place.

In simulator mode the engine is single-owner: time comes from a `LogicalClock`
pushed forward by the caller and cleaning runs inline whenever the free pool drops
below target. In server mode time comes from a `WallClock` and cleaning is the job
of a background worker; the engine only cleans inline when an append finds no free
segment at all.

Metrics
=======
Counters are cumulative. `MetricsRecorder` cuts them into windows of fixed length
whose boundaries are multiples of the window length, so runs of different engines
on the same trace have aligned windows.
"""
# Imports from standard library.
from dataclasses import dataclass, field, replace
import math
import threading
from typing import Callable, NamedTuple, Optional, Union
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.arbiter import Arbiter
from memshare.cleaner import Cleaner
from memshare.clock import Clock, LogicalClock, WallClock
from memshare.config import EngineConfig
from memshare.logstore import AppendResult, LogStore, LookupHit
from memshare.segment import AppId, RecordHeader
from memshare.shadow import key_hash


# Classes and Types
# =================


class Miss(NamedTuple):
    """A GET miss. ``shadow_hit`` tells whether the key was found in the shadow queue."""

    shadow_hit: bool = False


GetResult = Union[bytes, Miss]


@dataclass
class AppCounters:
    """Cumulative request counters of one application."""

    gets: int = 0
    hits: int = 0
    misses: int = 0
    shadow_hits: int = 0
    sets: int = 0
    deletes: int = 0


@dataclass
class AppStats:  # pylint: disable=too-many-instance-attributes
    """Per-application part of a `StatsSnapshot`."""

    app_id: AppId
    gets: int
    hits: int
    misses: int
    hit_rate: float
    shadow_hits: int
    actual_mem: int
    target_mem: int
    private_mem: int = 0
    shared_mem: int = 0
    shadow_entries: int = 0
    shadow_overhead_bytes: int = 0
    evicted_items: int = 0
    evicted_bytes: int = 0
    credits_received: int = 0
    credits_given: int = 0
    expected_share: float = 0.0


@dataclass
class StatsSnapshot:  # pylint: disable=too-many-instance-attributes
    """A consistent view of the engine. Exact when no request is in flight."""

    time: int
    apps: dict[AppId, AppStats]
    combined_hit_rate: float
    gets: int
    hits: int
    cleaner_bandwidth: float
    utilization: float
    free_segments: int
    total_memory: int
    miss_reduction: Optional[float] = None
    cleaning_passes: int = 0
    relocated_bytes: int = 0

    @property
    def miss_rate(self) -> float:
        """Combined miss rate ``1 - combined_hit_rate`` (0 without GETs)."""
        return 1.0 - self.combined_hit_rate if self.gets else 0.0

    def against(self, baseline: 'StatsSnapshot') -> 'StatsSnapshot':
        """Return a copy whose ``miss_reduction`` is computed against ``baseline``."""
        return replace(self, miss_reduction=miss_reduction(self.miss_rate, baseline.miss_rate))


class WindowSample(NamedTuple):
    """Per-window deltas of one metrics window ending at ``end``."""

    end: int
    gets: dict[AppId, int]
    hits: dict[AppId, int]
    shadow_hits: dict[AppId, int]
    occupancy: dict[AppId, int]
    target: dict[AppId, int]
    cleaner_bandwidth: float


# Functions
# =========


def hit_rate(hits: int, gets: int) -> float:
    """Return ``hits / gets``, or 0 without GETs."""
    return hits / gets if gets else 0.0


def miss_reduction(miss_rate: float, baseline_miss_rate: float) -> float:
    """Return ``1 - miss_rate / baseline_miss_rate``.

    A baseline without misses yields 0 if the candidate has none either, and
    negative infinity otherwise.
    """
    if baseline_miss_rate <= 0.0:
        return 0.0 if miss_rate <= 0.0 else -math.inf
    return 1.0 - miss_rate / baseline_miss_rate


# Metrics
# =======


class MetricsRecorder:
    """Per-application counters plus their windowed series.

    Args:
       apps (:obj:`list[AppId]`)
       window (:obj:`int`): window length in clock units.
       occupancy (:obj:`Callable`): returns bytes held per application.
       targets (:obj:`Callable`): returns targetMem per application.
       bandwidth (:obj:`Callable`): ``bandwidth(window, now)`` of the cleaner.

    """

    def __init__(self, apps: list[AppId], window: int,
                 occupancy: Callable[[], dict[AppId, int]],
                 targets: Callable[[], dict[AppId, int]],
                 bandwidth: Callable[[int, int], float]):
        self.window = window
        self.counters: dict[AppId, AppCounters] = {app: AppCounters() for app in sorted(apps)}
        self.samples: list[WindowSample] = []
        self._occupancy = occupancy
        self._targets = targets
        self._bandwidth = bandwidth
        self._window_start: Optional[int] = None
        self._base: dict[AppId, AppCounters] = self._copy_counters()
        self._lock = threading.Lock()

    def record_get(self, app: AppId, hit: bool, shadow_hit: bool = False) -> None:
        """Count one GET."""
        with self._lock:
            counters: AppCounters = self.counters[app]
            counters.gets += 1
            if hit:
                counters.hits += 1
            else:
                counters.misses += 1
            if shadow_hit:
                counters.shadow_hits += 1

    def record_set(self, app: AppId) -> None:
        """Count one SET."""
        with self._lock:
            self.counters[app].sets += 1

    def record_delete(self, app: AppId) -> None:
        """Count one DELETE."""
        with self._lock:
            self.counters[app].deletes += 1

    def observe(self, now: int) -> None:
        """Close every window that ended at or before ``now``."""
        if self._window_start is None:
            self._window_start = now - now % self.window
        while now >= self._window_start + self.window:
            self._close(self._window_start + self.window)

    def flush(self, now: int) -> None:
        """Close the windows up to ``now`` and then the partial window containing it."""
        self.observe(now)
        if self._window_start is not None:
            self._close(self._window_start + self.window)

    def _copy_counters(self) -> dict[AppId, AppCounters]:
        return {app: replace(c) for app, c in self.counters.items()}

    def _close(self, end: int) -> None:
        current: dict[AppId, AppCounters] = self._copy_counters()
        occupancy: dict[AppId, int] = self._occupancy()
        targets: dict[AppId, int] = self._targets()
        self.samples.append(WindowSample(
            end,
            {a: c.gets - self._base[a].gets for a, c in current.items()},
            {a: c.hits - self._base[a].hits for a, c in current.items()},
            {a: c.shadow_hits - self._base[a].shadow_hits for a, c in current.items()},
            {a: occupancy.get(a, 0) for a in current},
            {a: targets.get(a, 0) for a in current},
            self._bandwidth(self.window, end)))
        self._base = current
        self._window_start = end


# The Engine
# ==========


@dataclass
class Engine:  # pylint: disable=too-many-instance-attributes
    """The Memshare engine.

    Use `Engine.from_config` rather than the constructor.
    """

    config: EngineConfig
    store: LogStore
    arbiter: Arbiter
    cleaner: Cleaner
    clock: Clock
    metrics: MetricsRecorder = field(init=False)
    #: Set in server mode when a SET leaves the free pool below target.
    cleaning_wanted: threading.Event = field(init=False, default_factory=threading.Event)

    def __post_init__(self) -> None:
        self.metrics = MetricsRecorder(
            list(self.arbiter.apps), self.config.metrics_window_us,
            self.store.live_bytes_by_app,
            lambda: {a: s.target_mem for a, s in self.arbiter.apps.items()},
            self.cleaner.cleaner_bandwidth)
        self.store.on_exhausted = self._clean_inline

    @classmethod
    def from_config(cls, config: EngineConfig, clock: Optional[Clock] = None) -> 'Engine':
        """Build an engine for ``config.mode``.

        Args:
           config (:obj:`EngineConfig`): a validated configuration.
           clock (:obj:`Clock`, optional): defaults to a `LogicalClock` in simulator
              mode and a `WallClock` in server mode.

        """
        server: bool = config.mode == 'server'
        store = LogStore(config.segment_size_bytes, config.total_memory_bytes,
                         config.free_pool_target_fraction, config.hash_buckets,
                         blocking=server)
        arbiter: Arbiter = Arbiter.from_config(config, nonblocking_shadow=server)
        cleaner = Cleaner(store, arbiter, config.segments_per_pass, config.need_fraction,
                          config.tail_drop_threshold, config.rng_seed,
                          single_owner=not server,
                          max_parallel_passes=config.max_parallel_passes,
                          adaptive=config.adaptive_pass_size,
                          bandwidth_window=config.metrics_window_us)
        if clock is None:
            clock = WallClock() if server else LogicalClock()
        logger.info(f'engine mode={config.mode} segments={len(store.segments)} '
                    f'free_target={store.free_target} policy={config.policy}')
        return cls(config, store, arbiter, cleaner, clock)

    @property
    def server_mode(self) -> bool:
        """True iff requests may run concurrently with each other and the cleaner."""
        return self.config.mode == 'server'

    def _now(self, now: Optional[int]) -> int:
        return self.clock.advance(now)

    def _clean_inline(self) -> None:
        self.cleaner.clean(self.clock.now())

    # Requests
    # --------

    def get(self, app: AppId, key: bytes, now: Optional[int] = None) -> GetResult:
        """Return the value of ``key`` or a `Miss`.

        Raises:
           UnknownApp: if ``app`` is not registered.

        """
        self.arbiter.state(app)
        when: int = self._now(now)
        hit: Optional[LookupHit]
        with self.store.epochs.guard():
            hit = self.store.lookup(app, key, when)
        if hit is not None:
            self.arbiter.record_access(app, hit.total_size, hit.previous_access, when)
            self.metrics.record_get(app, True)
            return hit.value
        shadow_hit: bool = self.arbiter.on_miss_credit_transfer(app, key_hash(key)).shadow_hit
        self.metrics.record_get(app, False, shadow_hit)
        return Miss(shadow_hit)

    def set(self, app: AppId, key: bytes, value: bytes, now: Optional[int] = None) -> bool:
        """Store ``value`` under ``key``. Return True (the value is always stored).

        Raises:
           UnknownApp: if ``app`` is not registered.
           OversizeObject: if the record does not fit a segment.

        """
        self.arbiter.state(app)
        when: int = self._now(now)
        result: AppendResult = self.store.append(app, key, value, when)
        replaced: Optional[RecordHeader] = result.replaced
        if replaced is not None:
            self.arbiter.record_delete(app, replaced.total_size, replaced.last_access)
        self.arbiter.record_insert(app, result.total_size, when)
        self.metrics.record_set(app)
        if self.store.needs_cleaning():
            if self.server_mode:
                self.cleaning_wanted.set()
            else:
                self.cleaner.clean(when)
        return True

    def delete(self, app: AppId, key: bytes, now: Optional[int] = None) -> bool:
        """Delete ``key``. Return True iff it was present.

        Raises:
           UnknownApp: if ``app`` is not registered.

        """
        self.arbiter.state(app)
        self._now(now)
        header: Optional[RecordHeader] = self.store.remove(app, key)
        self.metrics.record_delete(app)
        if header is None:
            return False
        self.arbiter.record_delete(app, header.total_size, header.last_access)
        return True

    # Periodic work
    # -------------

    def tick(self, now: Optional[int] = None) -> None:
        """Run the arbiter's periodic policy work and roll metric windows over."""
        when: int = self.clock.now() if now is None else now
        self.arbiter.tick(when)
        self.metrics.observe(when)

    def finish(self, now: Optional[int] = None) -> None:
        """Close the last, possibly partial, metrics window."""
        self.metrics.flush(self.clock.now() if now is None else now)

    def run_auto_private(self, window: int, now: Optional[int] = None) -> dict[AppId, int]:
        """Set privateMem from the mean targets of the last ``window`` and switch to idle tax.

        Raises:
           InsufficientHistory: if less than ``window`` of target history exists.

        """
        when: int = self.clock.now() if now is None else now
        private: dict[AppId, int] = self.arbiter.auto_private_memory(window, when)
        self.arbiter.switch_to_idle_tax(private, when)
        return private

    # Statistics
    # ----------

    def stats(self, baseline: Optional[StatsSnapshot] = None) -> StatsSnapshot:
        """Return a snapshot of every counter, optionally with a miss reduction."""
        now: int = self.clock.now()
        free_bytes: int = self.store.free_count() * self.store.segment_size
        shares: dict[AppId, float] = self.arbiter.proportional_share(free_bytes)
        apps: dict[AppId, AppStats] = {}
        for app, state in sorted(self.arbiter.apps.items()):
            counters: AppCounters = self.metrics.counters[app]
            apps[app] = AppStats(
                app, counters.gets, counters.hits, counters.misses,
                hit_rate(counters.hits, counters.gets), counters.shadow_hits,
                state.actual_mem, state.target_mem, state.private_mem, state.shared_mem,
                len(state.shadow_queue), state.shadow_queue.overhead_bytes,
                state.evicted_items, state.evicted_bytes, state.credits_received,
                state.credits_given, shares[app])
        gets: int = sum(a.gets for a in apps.values())
        hits: int = sum(a.hits for a in apps.values())
        snapshot = StatsSnapshot(
            now, apps, hit_rate(hits, gets), gets, hits,
            self.cleaner.cleaner_bandwidth(self.config.metrics_window_us, now),
            self.store.utilization_report().utilization, self.store.free_count(),
            self.config.total_memory_bytes, cleaning_passes=self.cleaner.passes,
            relocated_bytes=self.cleaner.relocated_bytes)
        return snapshot.against(baseline) if baseline is not None else snapshot


if __name__ == '__main__':
    from memshare.config import config_from_mapping
    engine: Engine = Engine.from_config(config_from_mapping({
        'total_memory_bytes': '64K', 'segment_size_bytes': '4K',
        'app.1.credit_size_bytes': '1K', 'app.2.credit_size_bytes': '1K'}))
    engine.set(AppId(1), b'foo', b'bar')
    logger.info('>>> engine.get(1, b"foo")')
    logger.info(engine.get(AppId(1), b'foo'))
    logger.info('>>> engine.get(2, b"foo")')
    logger.info(engine.get(AppId(2), b'foo'))
