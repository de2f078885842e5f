#! /usr/bin/env python3.9

import pytest
from memshare.arbiter import Arbiter, MAXIMAL_NEED
from memshare.cleaner import (Candidate, Cleaner, collect_candidates, drop_underutilized_tail,
                              plan_pass, PassPlan, segment_score, select_segments,
                              SelectionPolicy)
from memshare.errors import NotEnoughSegments
from memshare.logstore import LogStore
from memshare.rank import LRU
from memshare.segment import AppId, LogLocation, Segment, SegmentId, SegmentState
from memshare.shadow import key_hash

A, B = AppId(1), AppId(2)
ITEM = 100


class FixedPolicy:
    """Targets and actuals set by hand, LRU ranks, evictions collected."""

    def __init__(self, snapshot, reserved=None):
        self.snapshot = snapshot
        self.reserved = reserved or {}
        self.evicted = []

    def targets_and_actuals(self):
        return dict(self.snapshot)

    def reserved_memory(self):
        return dict(self.reserved)

    def rank_of(self, app, last_access, frequency):
        return last_access

    def record_evictions(self, app, evictions):
        self.evicted.extend(evictions)


def key(number):
    return b'k%03d' % number


def one_app_cache(segments=6):
    store = LogStore(1000, segments * 1000, hash_buckets=16, blocking=False)
    arbiter = Arbiter(segments * 1000, 'partitioned')
    arbiter.register_initial([(A, segments * 1000, 1024, LRU, 100_000)])
    return store, arbiter


def insert(store, arbiter, app, number, now):
    result = store.append(app, key(number), bytes(ITEM - 26), now)
    assert result.total_size == ITEM
    arbiter.record_insert(app, result.total_size, now)
    if result.replaced is not None:
        arbiter.record_delete(app, result.replaced.total_size, result.replaced.last_access)


def remove(store, arbiter, app, number):
    header = store.remove(app, key(number))
    arbiter.record_delete(app, header.total_size, header.last_access)


def candidate(app, size, last_access, order):
    return Candidate(app, key(order), LogLocation(SegmentId(0), order * size), size,
                     last_access, 1, order)


def test_segment_score():
    seg = Segment(SegmentId(0), 1000)
    seg.live_by_app[A] = 300
    seg.live_by_app[B] = 100
    assert segment_score(seg, {A: 0.5, B: 2.0}) == 650
    assert segment_score(seg, {A: MAXIMAL_NEED, B: 2.0}) == 50
    assert segment_score(seg, {A: 0.0, B: 2.0}) == float('inf')


def test_select_segments():
    store = LogStore(ITEM * 2, ITEM * 2 * 6, blocking=False)
    for number in range(11):
        store.append(A if (number // 2) % 2 == 0 else B, key(number), bytes(ITEM - 26), number)
    assert [s.segment_id for s in store.sealed_segments()] == [0, 1, 2, 3, 4]
    needs = {A: 0.5, B: 2.0}

    chosen = select_segments(store, 3, SelectionPolicy(1.0), needs)
    assert [s.segment_id for s in chosen] == [0, 2, 4]

    chosen = select_segments(store, 2, SelectionPolicy(0.5), needs)
    assert chosen[0].segment_id == 0
    assert chosen[1].segment_id in (1, 2, 3, 4)

    assert len(select_segments(store, 50, SelectionPolicy(0.5), needs)) == 5
    assert store.head not in select_segments(store, 50, SelectionPolicy(0.0), needs)


def test_select_segments_needs_two_sealed():
    store = LogStore(ITEM * 2, ITEM * 2 * 6, blocking=False)
    for number in range(3):
        store.append(A, key(number), bytes(ITEM - 26), number)
    with pytest.raises(NotEnoughSegments):
        select_segments(store, 2, SelectionPolicy(), {})


def test_plan_pass_prefers_high_need():
    policy = FixedPolicy({A: (100, 200), B: (300, 200)})
    candidates = [candidate(A, 50, 1, 0), candidate(A, 50, 2, 1),
                  candidate(B, 50, 3, 2), candidate(B, 50, 4, 3)]
    plan = plan_pass(candidates, 1, 150, policy)
    assert [(c.app_id, c.last_access) for c in plan.outputs[0]] == [(B, 4), (B, 3), (A, 2)]
    assert [(c.app_id, c.last_access) for c in plan.evicted] == [(A, 1)]


def test_plan_pass_restores_reservations_first():
    policy = FixedPolicy({A: (300, 200), B: (120, 200)}, reserved={B: 150})
    candidates = [candidate(A, 50, 1, 0), candidate(A, 50, 2, 1),
                  candidate(B, 50, 3, 2), candidate(B, 50, 4, 3)]
    plan = plan_pass(candidates, 1, 150, policy)
    assert [(c.app_id, c.last_access) for c in plan.outputs[0]] == [(B, 4), (A, 2), (A, 1)]
    assert [(c.app_id, c.last_access) for c in plan.evicted] == [(B, 3)]


def test_plan_pass_ties_break_on_insertion_order():
    policy = FixedPolicy({A: (100, 100)})
    candidates = [candidate(A, 50, 7, 0), candidate(A, 50, 7, 1)]
    plan = plan_pass(candidates, 1, 50, policy)
    assert plan.outputs[0][0].order == 0
    assert plan.evicted[0].order == 1


def test_plan_pass_without_outputs_evicts_everything():
    policy = FixedPolicy({A: (100, 100)})
    candidates = [candidate(A, 50, 1, 0)]
    plan = plan_pass(candidates, 0, 100, policy)
    assert plan.outputs == []
    assert plan.evicted == candidates


def test_drop_underutilized_tail():
    plan = PassPlan([[candidate(A, 600, 2, 0)], [candidate(A, 100, 1, 1)]], [], 1000)
    assert drop_underutilized_tail(plan, 0.0) == 0
    assert drop_underutilized_tail(plan, 0.05) == 0
    assert drop_underutilized_tail(plan, 0.5) == 1
    assert len(plan.outputs) == 1
    assert [c.order for c in plan.evicted] == [1]
    assert drop_underutilized_tail(plan, 0.5) == 0


def test_collect_candidates_skips_dead_records():
    store, arbiter = one_app_cache()
    for number in range(11):
        insert(store, arbiter, A, number, number + 1)
    remove(store, arbiter, A, 3)
    insert(store, arbiter, A, 4, 20)
    candidates, dead = collect_candidates(store, [store.segment(SegmentId(0))])
    assert [c.key for c in candidates] == [key(n) for n in range(10) if n not in (3, 4)]
    assert dead == 2 * ITEM


def test_pass_evicts_least_recently_used():
    store, arbiter = one_app_cache()
    for number in range(51):
        insert(store, arbiter, A, number, number + 1)
    assert store.free_count() == 0
    cleaner = Cleaner(store, arbiter, segments_per_pass=5, tail_drop_threshold=0.0)
    report = cleaner.run_pass(100)

    assert len(report.inputs) == 5
    assert len(report.outputs) == 4
    assert report.segments_freed == 1
    assert report.relocated_items == 40
    assert report.relocated_bytes == 40 * ITEM
    assert sorted(e.last_access for e in report.evicted) == list(range(1, 11))
    for number in range(51):
        assert (store.lookup(A, key(number), 200) is None) == (number < 10)
    assert store.free_count() == 1
    assert arbiter.state(A).actual_mem == 41 * ITEM
    assert key_hash(key(0)) in arbiter.state(A).shadow_queue
    assert sum(store.audit().values()) == store.live_bytes() == 41 * ITEM


def test_pass_drops_underutilized_tail():
    store, arbiter = one_app_cache()
    for number in range(51):
        insert(store, arbiter, A, number, number + 1)
    for number in range(17):
        remove(store, arbiter, A, number)
    cleaner = Cleaner(store, arbiter, segments_per_pass=5, tail_drop_threshold=0.5)
    report = cleaner.run_pass(100)
    assert report.tail_dropped
    assert report.dead_bytes == 17 * ITEM
    assert len(report.outputs) == 3
    assert report.segments_freed == 2
    assert sorted(e.last_access for e in report.evicted) == [18, 19, 20]


def test_pass_with_free_outputs_relocates_first():
    store, arbiter = one_app_cache(segments=8)
    for number in range(51):
        insert(store, arbiter, A, number, number + 1)
    assert store.free_count() == 2
    cleaner = Cleaner(store, arbiter, segments_per_pass=2, need_fraction=1.0,
                      tail_drop_threshold=0.0)
    with store.epochs.guard():
        report = cleaner.run_pass(100)
        assert report.inputs == [0, 1]
        assert store.free_count() == 1
        assert [store.segment(s).state for s in report.inputs] == [SegmentState.RETIRED] * 2
    assert store.reclaim_retired() == 2
    assert store.free_count() == 3
    assert sorted(e.last_access for e in report.evicted) == list(range(1, 11))
    assert store.lookup(A, key(15), 200) is not None


def test_server_pass_clamps_to_free_pool():
    store, arbiter = one_app_cache()
    for number in range(51):
        insert(store, arbiter, A, number, number + 1)
    cleaner = Cleaner(store, arbiter, segments_per_pass=5, single_owner=False)
    report = cleaner.run_pass(100)
    assert len(report.inputs) == 1
    assert report.outputs == []
    assert len(report.evicted) == 10
    assert store.free_count() == 1


def test_clean_refills_free_pool():
    store, arbiter = one_app_cache()
    for number in range(51):
        insert(store, arbiter, A, number, number + 1)
    cleaner = Cleaner(store, arbiter, segments_per_pass=5)
    reports = cleaner.clean(100)
    assert reports
    assert not store.needs_cleaning()
    assert cleaner.passes == len(reports)
    assert cleaner.segments_freed == sum(r.segments_freed for r in reports)


def test_cleaner_metrics():
    store, arbiter = one_app_cache()
    for number in range(51):
        insert(store, arbiter, A, number, number + 1)
    cleaner = Cleaner(store, arbiter, segments_per_pass=5, tail_drop_threshold=0.0)
    assert cleaner.relocated_per_freed_segment() == 0.0
    cleaner.run_pass(100)
    assert cleaner.cleaner_bandwidth(1_000_000, 100) == 2 * 40 * ITEM
    assert cleaner.cleaner_bandwidth(1_000_000, 5_000_000) == 0.0
    assert cleaner.relocated_per_freed_segment() == 40 * ITEM
    with pytest.raises(ValueError):
        cleaner.set_segments_per_pass(0)


def test_bandwidth_samples_are_pruned_as_passes_run():
    store, arbiter = one_app_cache()
    for number in range(51):
        insert(store, arbiter, A, number, number + 1)
    cleaner = Cleaner(store, arbiter, segments_per_pass=5, tail_drop_threshold=0.0,
                      bandwidth_window=1000)
    cleaner.run_pass(100)
    cleaner.run_pass(5000)
    assert cleaner.passes == 2
    assert [when for when, _ in cleaner._bandwidth] == [5000]
    assert cleaner.cleaner_bandwidth(1000, 5000) > 0.0
