#! /usr/bin/env python3.9

import random
import statistics
import pytest
from memshare.arbiter import Arbiter
from memshare.cleaner import Cleaner
from memshare.config import KIB, MIB
from memshare.experiment import bench_clean, bundled_config, ReplayOptions, run_experiment
from memshare.logstore import LogStore
from memshare.rank import LRU
from memshare.segment import AppId, RECORD_HEADER
from memshare.shadow import key_hash
from memshare.slab import item_size, SlabCache
from memshare.trace import GET, TraceRecord
from memshare.workload import bundled_workload, generate, LARGE_ITEM, SMALL_ITEM

A, B, C = AppId(1), AppId(2), AppId(3)


# LRU equivalence
# ===============

RECORD = 128
SEGMENT = 4 * KIB


def lru_instance(seed):
    """Replay random operations; compare every pass with a byte-budget LRU oracle."""
    rng = random.Random(seed)
    store = LogStore(SEGMENT, 8 * SEGMENT, hash_buckets=64, blocking=False)
    arbiter = Arbiter(8 * SEGMENT, 'partitioned')
    arbiter.register_initial([(A, 8 * SEGMENT, KIB, LRU, 1000)])
    cleaner = Cleaner(store, arbiter, segments_per_pass=8, tail_drop_threshold=0.0)
    last_access = {}
    passes = 0
    for now in range(1, rng.randint(300, 1000) + 1):
        key = b'k%03d' % rng.randrange(1000)
        roll = rng.random()
        if roll < 0.7:
            result = store.append(A, key, bytes(RECORD - 26), now)
            assert result.total_size == RECORD
            if result.replaced is not None:
                arbiter.record_delete(A, result.replaced.total_size, result.replaced.last_access)
            arbiter.record_insert(A, RECORD, now)
            last_access[key] = now
        elif roll < 0.9:
            hit = store.lookup(A, key, now)
            assert (hit is not None) == (key in last_access)
            if hit is not None:
                last_access[key] = now
        else:
            header = store.remove(A, key)
            assert (header is not None) == (key in last_access)
            if header is not None:
                arbiter.record_delete(A, header.total_size, header.last_access)
                del last_access[key]

        sealed = store.sealed_segments()
        if store.free_count() == 0 and len(sealed) >= 2:
            sealed_ids = {s.segment_id for s in sealed}
            in_pass = sorted(t for k, t in last_access.items()
                             if store.location_of(A, k).segment_id in sealed_ids)
            budget = (len(sealed) - 1) * (SEGMENT // RECORD)
            expected = in_pass[:max(0, len(in_pass) - budget)]
            report = cleaner.run_pass(now)
            assert sorted(e.last_access for e in report.evicted) == expected
            gone = set(expected)
            for key in [k for k, t in last_access.items() if t in gone]:
                del last_access[key]
            assert all(store.location_of(A, k) is not None for k in last_access)
            passes += 1
    return passes


def test_cleaner_matches_lru_oracle():
    passes = [lru_instance(seed) for seed in range(200)]
    assert sum(passes) > 100


# Credits
# =======


def test_credit_transfers_conserve_shared_memory():
    rng = random.Random(3)
    arbiter = Arbiter(3 * MIB, 'shared', rng_seed=5)
    arbiter.register_initial([(A, 0, 3 * KIB, LRU, 1000), (B, 0, KIB, LRU, 1000),
                              (C, 0, 2 * KIB, LRU, 1000)])
    total = arbiter.total_shared()
    assert total == 3 * MIB
    for number in range(10_000):
        app = rng.choice((A, B, C))
        digest = key_hash(b'%d' % number)
        arbiter.record_insert(app, 100, number)
        arbiter.record_eviction(app, digest, 100, number)
        assert arbiter.on_miss_credit_transfer(app, digest).shadow_hit
        assert arbiter.total_shared() == total
    assert all(state.shared_mem >= 0 for state in arbiter.apps.values())


def test_credit_sizes_weight_gains():
    arbiter = Arbiter(30 * MIB, 'shared', rng_seed=1)
    arbiter.register_initial([(A, 0, 3 * KIB, LRU, 1000), (B, 0, KIB, LRU, 1000),
                              (C, 0, KIB, LRU, 1000)])
    for number in range(2000):
        app = A if number % 2 == 0 else B
        digest = key_hash(b'%d' % number)
        arbiter.record_insert(app, 100, number)
        arbiter.record_eviction(app, digest, 100, number)
        assert arbiter.on_miss_credit_transfer(app, digest).amount == (3 * KIB if app == A
                                                                       else KIB)
    assert arbiter.state(A).credits_received == 3 * arbiter.state(B).credits_received


def test_credit_sizes_weight_shared_memory():
    gains = {}
    for credit in (3 * KIB, KIB):
        arbiter = Arbiter(30 * MIB, 'shared', rng_seed=1)
        arbiter.register_initial([(C, 0, KIB, LRU, 1000)])
        arbiter.register(A, credit_size=credit, shadow_bytes=1000)
        for number in range(1000):
            digest = key_hash(b'%d' % number)
            arbiter.record_insert(A, 100, number)
            arbiter.record_eviction(A, digest, 100, number)
            assert arbiter.on_miss_credit_transfer(A, digest).donor == C
        gains[credit] = arbiter.state(A).shared_mem
        assert arbiter.total_shared() == 30 * MIB
    assert gains[3 * KIB] == 3 * gains[KIB] == 3000 * KIB


# Cleaning cost
# =============


def write_heavy_trace(requests=20_000, keys=6000):
    rng = random.Random(11)
    return [TraceRecord(number * 1000, GET, A, 'k%05d' % rng.randrange(keys), 100)
            for number in range(requests)]


def test_relocation_grows_with_segments_per_pass():
    config = bundled_config(total_memory_bytes=256 * KIB, segment_size_bytes=4 * KIB,
                            tail_drop_threshold=0.0)
    rows = bench_clean(config, write_heavy_trace(), [1, 2, 10, 20],
                       ReplayOptions(fill_on_miss=True))
    assert [row.segments_per_pass for row in rows] == [1, 2, 10, 20]
    assert all(row.passes > 0 for row in rows)
    assert rows[0].relocated_per_freed_segment == 0.0
    costs = [row.relocated_per_freed_segment for row in rows[1:]]
    assert costs == sorted(costs)
    assert costs[0] < costs[-1]


# Fragmentation
# =============


def test_log_packs_mixed_sizes_tighter_than_slabs():
    rng = random.Random(2)
    slab = SlabCache(MIB, 'greedy', slab_size=64 * KIB)
    store = LogStore(64 * KIB, MIB, blocking=False)
    for number in range(4000):
        key = b'k%05d' % number
        item = LARGE_ITEM if rng.random() < 0.05 else SMALL_ITEM
        value = bytes(item - RECORD_HEADER - len(key))
        assert item_size(key, value) == item
        slab.slab_set(A, key, value)
        store.append(A, key, value, number)
    slab_report = slab.utilization_report()
    log_report = store.utilization_report()
    assert 0.70 <= 1.0 - slab_report.fragmentation <= 0.95
    assert log_report.utilization >= 0.98
    assert log_report.utilization > 1.0 - slab_report.fragmentation + 0.2


# Bundled corpus
# ==============


@pytest.fixture(scope='module')
def corpus():
    return list(generate(bundled_workload(), None))


def private_split(fraction):
    share = int(MIB * fraction / 3)
    return {f'app.{app}.private_mem_bytes': share for app in (1, 2, 3)}


@pytest.fixture(scope='module')
def corpus_runs(corpus):
    configs = {'shared': bundled_config(policy='shared'),
               'idle_tax': bundled_config(policy='idle_tax'),
               'slab': bundled_config(engine='slab_partitioned', policy='partitioned'),
               'private_50': bundled_config(policy='shared', **private_split(0.5)),
               'private_100': bundled_config(policy='shared', **private_split(1.0))}
    return {name: run_experiment(config, corpus, ReplayOptions(fill_on_miss=True))
            for name, config in configs.items()}


def test_policy_ordering(corpus_runs):
    shared = corpus_runs['shared'].combined_hit_rate
    idle_tax = corpus_runs['idle_tax'].combined_hit_rate
    slab = corpus_runs['slab'].combined_hit_rate
    assert shared >= idle_tax >= slab
    assert shared >= slab + 0.005


def test_private_memory_sweep_trend(corpus_runs):
    rates = [corpus_runs[name].combined_hit_rate
             for name in ('shared', 'private_50', 'private_100')]
    assert rates[0] >= rates[1] >= rates[2]


def test_private_memory_is_enforced(corpus_runs):
    share = int(MIB * 0.5 / 3)
    windows = corpus_runs['private_50'].windows
    saturated = [index for index, sample in enumerate(windows)
                 if sum(sample.occupancy.values()) >= 0.8 * MIB]
    assert saturated
    for app in (A, B, C):
        reached = [index for index, sample in enumerate(windows)
                   if sample.occupancy.get(app, 0) >= share]
        assert reached
        start = max(saturated[0], reached[0])
        held = [windows[index].occupancy.get(app, 0) for index in range(start, len(windows))]
        assert statistics.mean(held) >= 0.95 * share


def test_windowed_occupancy_stays_within_memory(corpus_runs):
    for name in ('shared', 'idle_tax', 'private_50'):
        assert all(sum(s.occupancy.values()) <= MIB for s in corpus_runs[name].windows)
