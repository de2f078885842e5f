#!/usr/bin/env python3.9
"""The cleaner: reclaims log memory by relocating valuable records and evicting the rest.

Cleaning Passes
===============
A pass takes ``n`` sealed segments and writes the records worth keeping into at
most ``n - 1`` fresh segments, so that every pass frees at least one segment.

   1. *Selection.* Half of the inputs (by default) are the sealed segments holding
      the most bytes of applications with low need; the rest are picked at random
      so no application can stay over-provisioned forever behind worse offenders.
   2. *Planning.* Every live record of the inputs is a candidate. Each
      application's live bytes in the inputs are provisionally taken off its
      actualMem. Then, repeatedly, the application with the highest need is chosen
      and its highest-ranked remaining candidate is placed into the outputs, which
      gives its bytes back to that application and lowers its need. Planning stops
      at the first chosen candidate that no longer fits. An application holding
      less than its reservation always goes before the others, so privateMem
      survives even when the targets add up to more than the log can hold.
   3. *Tail drop.* Outputs are filled in descending (need, rank) order, so the last
      output holds the least valuable survivors; when it is under-utilized it is
      dropped and its records are evicted too.
   4. *Materialization.* Survivors are copied into the outputs and their index
      entries swung over; every other candidate is evicted and reported to the
      arbiter in one batch per application. Inputs are retired at the current
      epoch.

The cleaner never interprets applications or ranks itself: it asks a
`RelocationPolicy` (the arbiter) for targets, actual sizes and record ranks, and
hands evictions back to it.
"""
# Imports from standard library.
from collections import deque
from dataclasses import dataclass, field
import math
import random
import threading
from typing import Iterable, NamedTuple, Optional, Protocol
# Imports from third-party modules.
from loguru import logger
import more_itertools as mit
# Imports from local modules.
from memshare.arbiter import Eviction, MAXIMAL_NEED, need_ratio
from memshare.errors import NotEnoughSegments
from memshare.logstore import LogStore
from memshare.rank import RankValue
from memshare.segment import AppId, LogLocation, Segment, SegmentId
from memshare.shadow import key_hash


# Classes and Types
# =================


class RelocationPolicy(Protocol):
    """What the cleaner needs to know about applications."""

    def targets_and_actuals(self) -> dict[AppId, tuple[int, int]]:
        """Snapshot ``(targetMem, actualMem)`` per application."""

    def reserved_memory(self) -> dict[AppId, int]:
        """Bytes per application the cleaner must not evict below."""

    def rank_of(self, app: AppId, last_access: int, frequency: int) -> RankValue:
        """Rank one record of ``app``."""

    def record_evictions(self, app: AppId, evictions: Iterable[Eviction]) -> None:
        """Account a batch of evictions of ``app``."""


class Candidate(NamedTuple):
    """A live record found in a pass input."""

    app_id: AppId
    key: bytes
    location: LogLocation
    size: int
    last_access: int
    frequency: int
    order: int


@dataclass
class SelectionPolicy:
    """How pass inputs are chosen: ``ceil(need_fraction * n)`` by score, the rest at random."""

    need_fraction: float = 0.5
    rng: random.Random = field(default_factory=lambda: random.Random(0))


@dataclass
class PassPlan:
    """Survivors grouped per output segment, plus the candidates to evict."""

    outputs: list[list[Candidate]]
    evicted: list[Candidate]
    segment_size: int

    def fill(self, output: int) -> int:
        """Bytes planned into one output."""
        return sum(c.size for c in self.outputs[output])


@dataclass
class PassReport:  # pylint: disable=too-many-instance-attributes
    """Everything one cleaning pass did."""

    time: int
    inputs: list[SegmentId]
    outputs: list[SegmentId]
    residual_bytes: int
    relocated_bytes: int = 0
    relocated_items: int = 0
    evicted: list[Eviction] = field(default_factory=list)
    dead_bytes: int = 0
    tail_dropped: bool = False
    truncated: bool = False

    @property
    def segments_freed(self) -> int:
        """Inputs minus outputs; at least one for every pass."""
        return len(self.inputs) - len(self.outputs)

    @property
    def evicted_bytes(self) -> int:
        """Bytes of all evicted records."""
        return sum(e.length for e in self.evicted)


# Segment Selection
# =================


def segment_score(segment: Segment, needs: dict[AppId, float]) -> float:
    """Return the sum over live bytes of ``bytes / need(owner)``.

    Bytes of applications with maximal need count nothing; bytes of applications
    with zero need make the segment infinitely attractive.
    """
    score: float = 0.0
    for app, live in segment.live_by_app.items():
        if live <= 0:
            continue
        need: float = needs.get(app, 1.0)
        if need == MAXIMAL_NEED:
            continue
        score += math.inf if need <= 0.0 else live / need
    return score


def select_segments(store: LogStore, n: int, policy: SelectionPolicy,
                    needs: dict[AppId, float]) -> list[Segment]:
    """Choose up to ``n`` Sealed segments as pass inputs.

    Args:
       store (:obj:`LogStore`)
       n (:obj:`int`): wanted number of inputs. If fewer segments are sealed, all of
          them are used.
       policy (:obj:`SelectionPolicy`)
       needs (:obj:`dict[AppId, float]`): current need per application.

    Return:
       ``ceil(need_fraction * n)`` segments with the highest score followed by the
       remaining ones drawn uniformly at random without replacement. The head
       segment is never selected.

    Raises:
       NotEnoughSegments: If fewer than two segments are sealed.

    """
    sealed: list[Segment] = store.sealed_segments()
    if len(sealed) < 2:
        raise NotEnoughSegments(f'only {len(sealed)} sealed segments available')
    count: int = min(max(1, n), len(sealed))
    by_score: int = min(count, math.ceil(policy.need_fraction * count))

    ranked: list[Segment]
    ranked = sorted(sealed, key=lambda s: (-segment_score(s, needs), s.segment_id))
    chosen: list[Segment] = ranked[:by_score]
    rest: list[Segment] = sorted(ranked[by_score:], key=lambda s: s.segment_id)
    chosen += policy.rng.sample(rest, count - by_score)
    return chosen


# Planning
# ========


def collect_candidates(store: LogStore, inputs: list[Segment]) -> tuple[list[Candidate], int]:
    """Scan the inputs and return their live records plus the count of dead bytes."""
    candidates: list[Candidate] = []
    dead: int = 0
    order: int = 0
    for seg in inputs:
        for offset, header in seg.scan():
            key: bytes = seg.key_at(offset, header)
            location = LogLocation(seg.segment_id, offset)
            if store.is_live(header.app_id, key, location):
                candidates.append(Candidate(header.app_id, key, location, header.total_size,
                                            header.last_access, header.frequency, order))
                order += 1
            else:
                dead += header.total_size
    return candidates, dead


def plan_pass(candidates: list[Candidate], output_count: int, segment_size: int,
              relocation_policy: RelocationPolicy) -> PassPlan:
    """Decide which candidates survive and in which output they land.

    Args:
       candidates (:obj:`list[Candidate]`): the live records of the inputs.
       output_count (:obj:`int`): how many output segments may be filled.
       segment_size (:obj:`int`): capacity of one output segment.
       relocation_policy (:obj:`RelocationPolicy`): source of needs and ranks.

    Return:
       A `PassPlan` whose outputs are filled in the order the records were chosen.

    """
    queues: dict[AppId, deque[Candidate]] = {}
    grouped = mit.bucket(candidates, key=lambda c: c.app_id)
    for app in sorted(set(grouped)):
        queues[app] = deque(sorted(grouped[app], reverse=True, key=lambda c: (
            relocation_policy.rank_of(c.app_id, c.last_access, c.frequency),
            c.last_access, -c.order)))

    snapshot: dict[AppId, tuple[int, int]] = relocation_policy.targets_and_actuals()
    reserved: dict[AppId, int] = relocation_policy.reserved_memory()
    target: dict[AppId, int] = {app: snapshot.get(app, (0, 0))[0] for app in queues}
    actual: dict[AppId, int] = {app: snapshot.get(app, (0, 0))[1] for app in queues}
    for candidate in candidates:
        actual[candidate.app_id] -= candidate.size
    for app in actual:
        actual[app] = max(0, actual[app])

    outputs: list[list[Candidate]] = []
    fill: int = 0
    while queues:
        app: AppId = max(queues, key=lambda a: (actual[a] < reserved.get(a, 0),
                                                need_ratio(target[a], actual[a]), -a))
        candidate: Candidate = queues[app][0]
        if outputs and candidate.size <= segment_size - fill:
            fill += candidate.size
        elif len(outputs) < output_count:
            outputs.append([])
            fill = candidate.size
        else:
            break
        outputs[-1].append(candidate)
        actual[app] += candidate.size
        queues[app].popleft()
        if not queues[app]:
            del queues[app]

    evicted: list[Candidate] = [c for queue in queues.values() for c in queue]
    return PassPlan(outputs, evicted, segment_size)


def drop_underutilized_tail(plan: PassPlan, threshold: float) -> int:
    """Evict the records of the last output if it is filled below ``threshold``.

    Return:
       The number of segments this frees (0 or 1). A threshold of 0 never drops.

    """
    if threshold <= 0.0 or not plan.outputs:
        return 0
    if plan.fill(len(plan.outputs) - 1) / plan.segment_size >= threshold:
        return 0
    plan.evicted.extend(plan.outputs.pop())
    return 1


# The Cleaner
# ===========


class Cleaner:  # pylint: disable=too-many-instance-attributes
    """Runs cleaning passes over a `LogStore` on behalf of a `RelocationPolicy`.

    Args:
       store (:obj:`LogStore`)
       relocation_policy (:obj:`RelocationPolicy`): usually the `Arbiter`.
       segments_per_pass (:obj:`int`): ``n``, adjustable at runtime.
       need_fraction (:obj:`float`): share of inputs selected by score.
       tail_drop_threshold (:obj:`float`): utilization under which the last output
          is dropped; 0 disables tail drops.
       rng_seed (:obj:`int`): seed of the random part of segment selection.
       single_owner (:obj:`bool`): True in simulator mode. Allows passes to reuse
          their own inputs as outputs when the free pool is short.
       max_parallel_passes (:obj:`int`): concurrent passes allowed in server mode.
       adaptive (:obj:`bool`): halve ``n`` while the free pool stays below target
          after a full pass, grow it back afterwards.
       bandwidth_window (:obj:`int`): longest window `cleaner_bandwidth` is asked
          about; older relocation samples are dropped.

    """

    def __init__(self, store: LogStore, relocation_policy: RelocationPolicy,
                 segments_per_pass: int = 100, need_fraction: float = 0.5,
                 tail_drop_threshold: float = 0.5, rng_seed: int = 0,
                 single_owner: bool = True, max_parallel_passes: int = 1,
                 adaptive: bool = False, bandwidth_window: int = 60 * 1_000_000):
        self.store = store
        self.relocation_policy = relocation_policy
        self.configured_n = segments_per_pass
        self.n = segments_per_pass
        self.selection = SelectionPolicy(need_fraction, random.Random(rng_seed))
        self.tail_drop_threshold = tail_drop_threshold
        self.single_owner = single_owner
        self.adaptive = adaptive
        self.passes: int = 0
        self.relocated_bytes: int = 0
        self.evicted_bytes: int = 0
        self.segments_freed: int = 0
        self.last_report: Optional[PassReport] = None
        self._bandwidth: deque[tuple[int, int]] = deque()
        self.bandwidth_window = bandwidth_window
        self._slots = threading.BoundedSemaphore(max_parallel_passes)
        self._selection_lock = threading.Lock()

    def set_segments_per_pass(self, n: int) -> None:
        """Change ``n`` at runtime."""
        if n < 1:
            raise ValueError(f'segments per pass must be positive, got {n}')
        self.configured_n = self.n = n

    def _needs(self) -> dict[AppId, float]:
        return {app: need_ratio(target, actual) for app, (target, actual)
                in self.relocation_policy.targets_and_actuals().items()}

    def clean(self, now: int) -> list[PassReport]:
        """Run passes until the free pool reaches its target or no pass can run."""
        reports: list[PassReport] = []
        for _ in range(len(self.store.segments)):
            if not self.store.needs_cleaning():
                break
            try:
                report: Optional[PassReport] = self.run_pass(now)
            except NotEnoughSegments:
                logger.warning('free pool below target but too few sealed segments to clean')
                break
            if report is None:
                break
            reports.append(report)
            if self.store.free_count() == 0 and report.segments_freed == 0:
                break
        return reports

    def run_pass(self, now: int) -> Optional[PassReport]:
        """Select inputs and clean them. Return None if no input could be claimed.

        Raises:
           NotEnoughSegments: If fewer than two segments are sealed.

        """
        with self._slots:
            n: int = self.n
            if not self.single_owner:
                n = max(1, min(n, self.store.free_count() + 1))
            with self._selection_lock:
                chosen: list[Segment] = select_segments(self.store, n, self.selection,
                                                        self._needs())
                inputs: list[Segment] = self.store.mark_cleaning(chosen)
            if not inputs:
                return None
            report: PassReport = self.clean_pass(inputs, now)
        if self.adaptive:
            if self.store.needs_cleaning():
                self.n = max(2, self.n // 2)
            else:
                self.n = min(self.configured_n, self.n * 2)
        return report

    def clean_pass(self, inputs: list[Segment], now: int) -> PassReport:
        """Plan and materialize one pass over already-claimed input segments."""
        candidates, dead = collect_candidates(self.store, inputs)
        output_count: int = len(inputs) - 1
        plan: PassPlan = plan_pass(candidates, output_count, self.store.segment_size,
                                   self.relocation_policy)
        report = PassReport(now, [s.segment_id for s in inputs], [],
                            output_count * self.store.segment_size, dead_bytes=dead)
        report.tail_dropped = drop_underutilized_tail(plan, self.tail_drop_threshold) > 0

        outputs: list[Segment] = self.store.take_free_segments(len(plan.outputs))
        if len(outputs) == len(plan.outputs):
            self._relocate_then_retire(inputs, plan, outputs, report)
        elif self.single_owner:
            self.store.release(outputs)
            self._retire_then_rewrite(inputs, plan, report)
        else:
            report.truncated = True
            logger.warning(f'pass truncated to {len(outputs)} of {len(plan.outputs)} outputs')
            while len(plan.outputs) > len(outputs):
                plan.evicted.extend(plan.outputs.pop())
            self._relocate_then_retire(inputs, plan, outputs, report)

        self._account(report)
        logger.debug(f'pass inputs={len(report.inputs)} outputs={len(report.outputs)} '
                     f'relocated={report.relocated_bytes} evicted={len(report.evicted)} '
                     f'dead={report.dead_bytes} tail_dropped={report.tail_dropped}')
        return report

    def _relocate_then_retire(self, inputs: list[Segment], plan: PassPlan,
                              outputs: list[Segment], report: PassReport) -> None:
        """Copy survivors into free outputs first; readers may run concurrently."""
        for output, survivors in zip(outputs, plan.outputs):
            for candidate in survivors:
                source: Segment = self.store.segment(candidate.location.segment_id)
                payload: bytes = source.raw_at(candidate.location.offset, candidate.size)
                if self.store.relocate(candidate.app_id, candidate.key, candidate.location,
                                       payload, output) is not None:
                    report.relocated_bytes += candidate.size
                    report.relocated_items += 1
        for candidate in plan.evicted:
            if self.store.detach(candidate.app_id, candidate.key, candidate.location):
                report.evicted.append(_eviction(candidate))
        self._finish(inputs, outputs, report)

    def _retire_then_rewrite(self, inputs: list[Segment], plan: PassPlan,
                             report: PassReport) -> None:
        """Stage survivors, free the inputs, then rewrite survivors into them.

        Only legal with a single owner: between retirement and rewrite, survivors
        are not reachable through the index.
        """
        staged: list[tuple[int, Candidate, bytes]] = []
        for number, survivors in enumerate(plan.outputs):
            for candidate in survivors:
                source: Segment = self.store.segment(candidate.location.segment_id)
                payload: bytes = source.raw_at(candidate.location.offset, candidate.size)
                if self.store.detach(candidate.app_id, candidate.key, candidate.location):
                    staged.append((number, candidate, payload))
        for candidate in plan.evicted:
            if self.store.detach(candidate.app_id, candidate.key, candidate.location):
                report.evicted.append(_eviction(candidate))
        self.store.retire(inputs)
        self.store.reclaim_retired()

        outputs: list[Segment] = self.store.take_free_segments(len(plan.outputs))
        for number, candidate, payload in staged:
            if number >= len(outputs):
                report.evicted.append(_eviction(candidate))
            elif self.store.attach(candidate.app_id, candidate.key, payload,
                                   outputs[number]) is not None:
                report.relocated_bytes += candidate.size
                report.relocated_items += 1
        self.store.seal(outputs)
        report.outputs = [s.segment_id for s in outputs]

    def _finish(self, inputs: list[Segment], outputs: list[Segment],
                report: PassReport) -> None:
        self.store.seal(outputs)
        report.outputs = [s.segment_id for s in outputs]
        self.store.retire(inputs)
        self.store.reclaim_retired()

    def _account(self, report: PassReport) -> None:
        by_app: dict[AppId, list[Eviction]] = {}
        for eviction in report.evicted:
            by_app.setdefault(eviction.app_id, []).append(eviction)
        for app, evictions in sorted(by_app.items()):
            self.relocation_policy.record_evictions(app, evictions)
        self.passes += 1
        self.relocated_bytes += report.relocated_bytes
        self.evicted_bytes += report.evicted_bytes
        self.segments_freed += report.segments_freed
        self.last_report = report
        self._bandwidth.append((report.time, report.relocated_bytes))
        self._prune_bandwidth(report.time, self.bandwidth_window)

    # Metrics
    # -------

    def cleaner_bandwidth(self, window: int, now: int) -> float:
        """Memory bandwidth of relocation in bytes per second over the last ``window``.

        Every relocated byte is read once and written once, so it counts twice.

        Args:
           window (:obj:`int`): window length in clock units (microseconds).
           now (:obj:`int`): end of the window.

        """
        if window <= 0:
            return 0.0
        self._prune_bandwidth(now, max(window, self.bandwidth_window))
        moved: int = sum(size for when, size in self._bandwidth if now - window < when <= now)
        return 2 * moved / (window / 1_000_000)

    def _prune_bandwidth(self, now: int, window: int) -> None:
        while self._bandwidth and self._bandwidth[0][0] <= now - 2 * window:
            self._bandwidth.popleft()

    def relocated_per_freed_segment(self) -> float:
        """Relocated bytes per segment freed, over the cleaner's lifetime."""
        return self.relocated_bytes / self.segments_freed if self.segments_freed else 0.0


def _eviction(candidate: Candidate) -> Eviction:
    return Eviction(candidate.app_id, key_hash(candidate.key), candidate.size,
                    candidate.last_access)
