#!/usr/bin/env python3.9
"""Per-application accounting and the policies that set each application's target.

Memory Model
============
Each application owns four byte counts:

   - *privateMem*: a floor reserved for the application.
   - *sharedMem*: its current share of the pool that is not reserved.
   - *targetMem*: how much memory the application should hold.
   - *actualMem*: how many live bytes it holds right now.

The *need* of an application is ``targetMem / actualMem``. The cleaner evicts from
applications with low need and keeps records of applications with high need, so the
policies below only ever have to move ``targetMem``:

   1. *partitioned*: ``targetMem = privateMem``, constant.
   2. *shared*: ``targetMem = privateMem + sharedMem``. A GET miss that hits the
      application's shadow queue moves one credit of sharedMem to it from a randomly
      chosen other application that has at least that much.
   3. *idle tax*: ``targetMem = privateMem / tau`` with
      ``tau = (1 - activeFraction * taxRate) / (1 - taxRate)``, so memory left idle
      for longer than idleTime is taxed away.
"""
# Imports from standard library.
from collections import Counter, deque
from dataclasses import dataclass, field
import math
import random
import threading
from typing import Final, Iterable, NamedTuple, Optional
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.config import EngineConfig
from memshare.errors import ConfigError, InsufficientHistory, UnknownApp
from memshare.rank import parse_rank_spec, rank, RankSpec, RankValue
from memshare.segment import AppId
from memshare.shadow import KeyHash, ShadowQueue


#: Need of an application that holds nothing but is owed memory.
MAXIMAL_NEED: Final = math.inf

_HISTOGRAM_SLOTS: Final = 32
_SLOTS_PER_IDLE_TIME: Final = 16


# Idle Memory Histogram
# =====================


class IdleHistogram:
    """Live bytes of one application bucketed by the time of their last access.

    Buckets are ``idle_time / 16`` wide and 32 of them are kept; mass older than the
    oldest bucket is folded into one overflow counter. The idle byte count is exact
    up to one bucket width.
    """

    def __init__(self, idle_time: int):
        self.width: int = max(1, idle_time // _SLOTS_PER_IDLE_TIME)
        self._slots: Counter[int] = Counter()
        self._overflow: int = 0
        self._base: int = 0

    def _slot(self, timestamp: int) -> int:
        return timestamp // self.width

    def _roll(self, now: int) -> None:
        """Fold slots that fell off the ring into the overflow counter."""
        base: int = max(self._base, self._slot(now) - _HISTOGRAM_SLOTS + 1)
        if base == self._base:
            return
        for slot in [s for s in self._slots if s < base]:
            self._overflow += self._slots.pop(slot)
        self._base = base

    def add(self, timestamp: int, length: int) -> None:
        """Account ``length`` live bytes last accessed at ``timestamp``."""
        self._roll(timestamp)
        slot: int = self._slot(timestamp)
        if slot < self._base:
            self._overflow += length
        else:
            self._slots[slot] += length

    def remove(self, timestamp: int, length: int) -> None:
        """Forget ``length`` live bytes last accessed at ``timestamp``."""
        slot: int = self._slot(timestamp)
        if slot < self._base or slot not in self._slots:
            self._overflow = max(0, self._overflow - length)
            return
        self._slots[slot] -= length
        if self._slots[slot] <= 0:
            del self._slots[slot]

    def move(self, old_timestamp: int, now: int, length: int) -> None:
        """Move bytes from their old access time to ``now``."""
        self.remove(old_timestamp, length)
        self.add(now, length)

    def total(self) -> int:
        """All bytes accounted in the histogram."""
        return self._overflow + sum(self._slots.values())

    def idle_bytes(self, now: int, idle_time: int) -> int:
        """Bytes whose last access is older than ``now - idle_time``."""
        self._roll(now)
        cutoff: int = now - idle_time
        return self._overflow + sum(length for slot, length in self._slots.items()
                                    if (slot + 1) * self.width <= cutoff)


# Classes and Types
# =================


@dataclass
class AppState:  # pylint: disable=too-many-instance-attributes
    """Accounting and policy state of one application."""

    app_id: AppId
    private_mem: int
    shared_mem: int
    target_mem: int
    credit_size: int
    rank_spec: RankSpec
    shadow_queue: ShadowQueue
    idle_histogram: IdleHistogram
    actual_mem: int = 0
    shadow_hits: int = 0
    shadow_skips: int = 0
    credits_received: int = 0
    credits_given: int = 0
    evicted_items: int = 0
    evicted_bytes: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class TransferReport(NamedTuple):
    """What a GET miss did to the shared pool."""

    shadow_hit: bool
    donor: Optional[AppId] = None
    amount: int = 0
    skipped: bool = False


class IdleTaxReport(NamedTuple):
    """Inputs and result of one idle-tax target computation."""

    idle_mem: int
    active_fraction: float
    tau: float
    target_mem: int


class Eviction(NamedTuple):
    """An item the cleaner dropped from the cache."""

    app_id: AppId
    key_hash: KeyHash
    length: int
    last_access: int


# Formulas
# ========


def need_ratio(target_mem: int, actual_mem: int) -> float:
    """Return ``target_mem / actual_mem``.

    Edge cases:

       * ``actual_mem == 0`` and ``target_mem > 0`` gives `MAXIMAL_NEED`.
       * both zero gives ``1.0``.

    """
    if actual_mem <= 0:
        return MAXIMAL_NEED if target_mem > 0 else 1.0
    return target_mem / actual_mem


def idle_tax_target(private_mem: int, tax_rate: float, active_fraction: float) -> int:
    r"""Return ``private_mem / tau`` with ``tau = (1 - a r) / (1 - r)``.

    Computed as ``private_mem (1 - r) / (1 - a r)`` so that ``r = 1`` is defined:
    it gives ``0`` unless the application is fully active, in which case it gives
    ``private_mem``.

    Raises:
       ConfigError: If ``tax_rate`` is not in :math:`[0, 1]`.

    """
    if not 0.0 <= tax_rate <= 1.0:
        raise ConfigError(f'tax_rate {tax_rate} not in [0, 1]')
    denominator: float = 1.0 - active_fraction * tax_rate
    if denominator <= 0.0:
        return private_mem
    return round(private_mem * (1.0 - tax_rate) / denominator)


def active_fraction_of(idle_mem: int, actual_mem: int) -> float:
    """Return ``1 - idle_mem / actual_mem``, or ``1`` when nothing is held."""
    if actual_mem <= 0:
        return 1.0
    return min(1.0, max(0.0, 1.0 - idle_mem / actual_mem))


# The Arbiter
# ===========


class Arbiter:  # pylint: disable=too-many-instance-attributes,too-many-public-methods
    """Owns every `AppState` and decides targetMem under the configured policy.

    Args:
       total_memory (:obj:`int`): bytes divided between applications.
       policy (:obj:`str`): ``partitioned``, ``shared`` or ``idle_tax``.
       tax_rate (:obj:`float`): idle tax rate in :math:`[0, 1]`.
       idle_time (:obj:`int`): idle threshold in clock units.
       rng_seed (:obj:`int`): seed of the donor-picking generator.
       tick_interval (:obj:`int`): clock units between idle-tax recomputations.
       nonblocking_shadow (:obj:`bool`): if True, a GET miss skips the shadow queue
          when its lock is busy instead of waiting.
       history_window (:obj:`int`): clock units of targetMem samples kept for
          `auto_private_memory`; older samples are dropped.

    """

    def __init__(self, total_memory: int, policy: str = 'shared',
                 tax_rate: float = 0.5, idle_time: int = 5 * 3600 * 1_000_000,
                 rng_seed: int = 0, tick_interval: int = 1_000_000,
                 nonblocking_shadow: bool = False,
                 history_window: int = 3600 * 1_000_000):
        if not 0.0 <= tax_rate <= 1.0:
            raise ConfigError(f'tax_rate {tax_rate} not in [0, 1]')
        self.total_memory = total_memory
        self.policy = policy
        self.tax_rate = tax_rate
        self.idle_time = idle_time
        self.tick_interval = tick_interval
        self.nonblocking_shadow = nonblocking_shadow
        self.apps: dict[AppId, AppState] = {}
        self.history: deque[tuple[int, dict[AppId, int]]] = deque(
            maxlen=history_window // max(1, tick_interval) + 2)
        self._rng = random.Random(rng_seed)
        self._credit_lock = threading.Lock()
        self._last_tick: Optional[int] = None

    @classmethod
    def from_config(cls, config: EngineConfig, nonblocking_shadow: bool = False) -> 'Arbiter':
        """Build an arbiter and register every application of ``config``."""
        arbiter = cls(config.total_memory_bytes, config.policy, config.tax_rate,
                      config.idle_time_us, config.rng_seed, config.tick_interval_us,
                      nonblocking_shadow, config.history_window_us)
        arbiter.register_initial([(app, config.private_mem(app),
                                   app_config.credit_size_bytes,
                                   parse_rank_spec(app_config.rank_policy),
                                   app_config.shadow_queue_bytes)
                                  for app, app_config in config.apps.items()])
        return arbiter

    # Registration
    # ------------

    def _new_state(self, app: AppId, private_mem: int, credit_size: int,
                   rank_spec: RankSpec, shadow_bytes: int) -> AppState:
        return AppState(app, private_mem, 0, private_mem, credit_size, rank_spec,
                        ShadowQueue(shadow_bytes), IdleHistogram(self.idle_time))

    def register_initial(self, apps: Iterable[tuple[AppId, int, int, RankSpec, int]]) -> None:
        """Register the applications known at startup.

        The memory not reserved as privateMem is split into equal sharedMem shares
        (the remainder of the integer division goes to the smallest app ids).
        """
        for app, private_mem, credit_size, rank_spec, shadow_bytes in apps:
            self.apps[app] = self._new_state(app, private_mem, credit_size,
                                             rank_spec, shadow_bytes)
        if self.policy == 'shared':
            pool: int = max(0, self.total_memory
                            - sum(s.private_mem for s in self.apps.values()))
            share, remainder = divmod(pool, len(self.apps))
            for position, app in enumerate(sorted(self.apps)):
                self.apps[app].shared_mem = share + (1 if position < remainder else 0)
        self._recompute_targets()
        logger.info(f'arbiter policy={self.policy} targets='
                    f'{ {a: s.target_mem for a, s in sorted(self.apps.items())} }')

    def register(self, app: AppId, private_mem: int = 0, credit_size: int = 64 * 1024,
                 rank_spec: Optional[RankSpec] = None,
                 shadow_bytes: int = 10 * 1024 * 1024) -> AppState:
        """Register an application after startup. It starts with no sharedMem."""
        if app in self.apps:
            raise ConfigError(f'application {app} is already registered')
        state: AppState = self._new_state(app, private_mem, credit_size,
                                          rank_spec or parse_rank_spec('lru'), shadow_bytes)
        self.apps[app] = state
        self._recompute_targets()
        return state

    def state(self, app: AppId) -> AppState:
        """Return the state of ``app``.

        Raises:
           UnknownApp: if ``app`` was never registered.

        """
        try:
            return self.apps[app]
        except KeyError:
            raise UnknownApp(f'unknown application {app}') from None

    # Need and rank
    # -------------

    def need(self, app: AppId) -> float:
        """Return the need ``targetMem / actualMem`` of ``app``."""
        state: AppState = self.state(app)
        return need_ratio(state.target_mem, state.actual_mem)

    def rank_of(self, app: AppId, last_access: int, frequency: int) -> RankValue:
        """Rank a record of ``app`` with that application's ranking function."""
        return rank(last_access, frequency, self.state(app).rank_spec)

    def targets_and_actuals(self) -> dict[AppId, tuple[int, int]]:
        """Snapshot ``(targetMem, actualMem)`` of every application."""
        return {app: (s.target_mem, s.actual_mem) for app, s in self.apps.items()}

    def reserved_memory(self) -> dict[AppId, int]:
        """Return ``min(privateMem, targetMem)`` of every application.

        Under the shared policy this is privateMem. Under the other policies it is
        targetMem, so reservations never outrank need there.
        """
        return {app: min(s.private_mem, s.target_mem) for app, s in self.apps.items()}

    def _recompute_targets(self) -> None:
        for state in self.apps.values():
            if self.policy == 'shared':
                state.target_mem = state.private_mem + state.shared_mem
            elif self.policy == 'partitioned':
                state.target_mem = state.private_mem

    # Accounting
    # ----------

    def record_insert(self, app: AppId, length: int, now: int) -> None:
        """A SET stored ``length`` bytes for ``app``."""
        state: AppState = self.state(app)
        with state.lock:
            state.actual_mem += length
            state.idle_histogram.add(now, length)

    def record_access(self, app: AppId, length: int, old_access: int, now: int) -> None:
        """A GET hit a ``length``-byte record last accessed at ``old_access``."""
        state: AppState = self.state(app)
        with state.lock:
            state.idle_histogram.move(old_access, now, length)

    def record_delete(self, app: AppId, length: int, last_access: int) -> None:
        """A record died by overwrite or delete. It does not enter the shadow queue."""
        state: AppState = self.state(app)
        with state.lock:
            state.actual_mem -= length
            state.idle_histogram.remove(last_access, length)

    def record_eviction(self, app: AppId, digest: KeyHash, length: int,
                        last_access: int = 0) -> None:
        """The cleaner evicted one record of ``app``."""
        self.record_evictions(app, [Eviction(app, digest, length, last_access)])

    def record_evictions(self, app: AppId, evictions: Iterable[Eviction]) -> None:
        """Apply a batch of evictions of one application under one lock acquisition."""
        state: AppState = self.state(app)
        with state.lock:
            for eviction in evictions:
                state.actual_mem -= eviction.length
                state.evicted_items += 1
                state.evicted_bytes += eviction.length
                state.shadow_queue.push(eviction.key_hash, eviction.length)
                state.idle_histogram.remove(eviction.last_access, eviction.length)

    # Shared policy
    # -------------

    def on_miss_credit_transfer(self, app: AppId, digest: KeyHash) -> TransferReport:
        """Handle a GET miss: consult the shadow queue and move a credit on a hit.

        A shadow hit consumes the shadow entry. Credits move only under the shared
        policy. With ``nonblocking_shadow`` a busy shadow queue is skipped and the
        miss moves nothing.
        """
        state: AppState = self.state(app)
        if not state.lock.acquire(blocking=not self.nonblocking_shadow):
            state.shadow_skips += 1
            logger.trace(f'shadow queue of app {app} busy, lookup skipped')
            return TransferReport(False, skipped=True)
        try:
            hit: bool = state.shadow_queue.take(digest) is not None
            if hit:
                state.shadow_hits += 1
        finally:
            state.lock.release()
        if not hit:
            return TransferReport(False)
        if self.policy != 'shared':
            return TransferReport(True)
        return self._transfer_credit(state)

    def _transfer_credit(self, gainer: AppState) -> TransferReport:
        """Move ``gainer.credit_size`` bytes of sharedMem from a random other app."""
        with self._credit_lock:
            credit: int = gainer.credit_size
            donors: list[AppId] = [app for app, s in sorted(self.apps.items())
                                   if app != gainer.app_id and s.shared_mem >= credit]
            if not donors:
                self._recompute_targets()
                return TransferReport(True)
            donor: AppState = self.apps[self._rng.choice(donors)]
            donor.shared_mem -= credit
            donor.credits_given += credit
            gainer.shared_mem += credit
            gainer.credits_received += credit
            self._recompute_targets()
        logger.trace(f'credit {credit} B from app {donor.app_id} to app {gainer.app_id}')
        return TransferReport(True, donor.app_id, credit)

    def total_shared(self) -> int:
        """Sum of sharedMem over all applications."""
        return sum(s.shared_mem for s in self.apps.values())

    def proportional_share(self, free_bytes: int) -> dict[AppId, float]:
        """Split ``free_bytes`` among applications in proportion to targetMem."""
        total: int = sum(s.target_mem for s in self.apps.values())
        if total <= 0:
            return {app: free_bytes / len(self.apps) for app in self.apps}
        return {app: free_bytes * s.target_mem / total for app, s in self.apps.items()}

    # Idle-tax policy
    # ---------------

    def set_target_idle_tax(self, app: AppId, tax_rate: float, idle_time: int,
                            now: int) -> IdleTaxReport:
        """Set ``targetMem`` of ``app`` from its idle memory.

        Raises:
           ConfigError: If ``tax_rate`` is not in :math:`[0, 1]`.

        """
        if not 0.0 <= tax_rate <= 1.0:
            raise ConfigError(f'tax_rate {tax_rate} not in [0, 1]')
        state: AppState = self.state(app)
        with state.lock:
            idle_mem: int = state.idle_histogram.idle_bytes(now, idle_time)
            active: float = active_fraction_of(idle_mem, state.actual_mem)
            state.target_mem = idle_tax_target(state.private_mem, tax_rate, active)
        tau: float = (math.inf if tax_rate == 1.0 and active < 1.0
                      else 1.0 if tax_rate == 1.0
                      else (1.0 - active * tax_rate) / (1.0 - tax_rate))
        return IdleTaxReport(idle_mem, active, tau, state.target_mem)

    def tick(self, now: int) -> bool:
        """Run periodic work if a tick interval has passed since the last one.

        Under the idle-tax policy every target is recomputed. Under every policy the
        targets are sampled into the history used by `auto_private_memory`.

        Return:
           True iff the periodic work ran.

        """
        if self._last_tick is not None and now - self._last_tick < self.tick_interval:
            return False
        self._last_tick = now
        if self.policy == 'idle_tax':
            for app in sorted(self.apps):
                self.set_target_idle_tax(app, self.tax_rate, self.idle_time, now)
        self.history.append((now, {app: s.target_mem for app, s in self.apps.items()}))
        return True

    # Automatic private memory
    # ------------------------

    def auto_private_memory(self, window: int, now: Optional[int] = None) -> dict[AppId, int]:
        """Return each application's mean targetMem over the last ``window``.

        Raises:
           InsufficientHistory: if fewer than ``window`` clock units of target
              samples were recorded.

        """
        if not self.history:
            raise InsufficientHistory('no target history recorded yet')
        end: int = now if now is not None else self.history[-1][0]
        start: int = end - window
        if start < self.history[0][0]:
            raise InsufficientHistory(f'window {window} exceeds the recorded history of '
                                      f'{end - self.history[0][0]}')
        samples: list[dict[AppId, int]] = [targets for when, targets in self.history
                                           if start <= when <= end]
        return {app: round(sum(s.get(app, 0) for s in samples) / len(samples))
                for app in sorted(self.apps)}

    def switch_to_idle_tax(self, private_mem: dict[AppId, int], now: int) -> None:
        """Adopt ``private_mem`` as privateMem and switch to the idle-tax policy."""
        with self._credit_lock:
            for app, state in self.apps.items():
                state.private_mem = private_mem.get(app, 0)
                state.shared_mem = 0
            self.policy = 'idle_tax'
        for app in sorted(self.apps):
            self.set_target_idle_tax(app, self.tax_rate, self.idle_time, now)
        self._last_tick = now
        logger.info(f'switched to idle tax with private memory {private_mem}')
