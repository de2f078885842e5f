#! /usr/bin/env python3.9

import math
import pytest
from memshare.arbiter import (active_fraction_of, Arbiter, IdleHistogram, idle_tax_target,
                              MAXIMAL_NEED, need_ratio)
from memshare.config import config_from_mapping
from memshare.errors import ConfigError, InsufficientHistory, UnknownApp
from memshare.rank import LFU, LRU
from memshare.segment import AppId
from memshare.shadow import key_hash

A, B, C = AppId(1), AppId(2), AppId(3)


def shared_arbiter(total=100, privates=(10, 0, 0), credit=10, seed=0):
    arbiter = Arbiter(total, 'shared', rng_seed=seed)
    arbiter.register_initial([(app, private, credit, LRU, 1000)
                              for app, private in zip((A, B, C), privates)])
    return arbiter


def test_need_ratio():
    assert need_ratio(10, 5) == 2.0
    assert need_ratio(5, 10) == 0.5
    assert need_ratio(5, 0) == MAXIMAL_NEED
    assert need_ratio(0, 0) == 1.0
    assert math.isinf(MAXIMAL_NEED)


def test_idle_tax_target():
    assert idle_tax_target(100, 0.5, 1.0) == 100
    assert idle_tax_target(100, 0.5, 0.0) == 50
    assert idle_tax_target(100, 0.0, 0.0) == 100
    assert idle_tax_target(100, 1.0, 1.0) == 100
    assert idle_tax_target(100, 1.0, 0.5) == 0
    with pytest.raises(ConfigError):
        idle_tax_target(100, 1.5, 0.5)


def test_active_fraction_of():
    assert active_fraction_of(25, 100) == 0.75
    assert active_fraction_of(0, 0) == 1.0
    assert active_fraction_of(200, 100) == 0.0


def test_register_initial_splits_shared_pool():
    arbiter = shared_arbiter()
    assert arbiter.targets_and_actuals() == {A: (40, 0), B: (30, 0), C: (30, 0)}
    arbiter = shared_arbiter(total=91)
    assert [arbiter.state(app).shared_mem for app in (A, B, C)] == [27, 27, 27]


def test_register_initial_remainder_goes_to_small_ids():
    arbiter = shared_arbiter(total=92, privates=(0, 0, 0))
    assert [arbiter.state(app).shared_mem for app in (A, B, C)] == [31, 31, 30]
    assert arbiter.total_shared() == 92


def test_partitioned_targets_are_private_mem():
    arbiter = Arbiter(100, 'partitioned')
    arbiter.register_initial([(A, 60, 10, LRU, 0), (B, 40, 10, LFU, 0)])
    assert arbiter.targets_and_actuals() == {A: (60, 0), B: (40, 0)}
    assert arbiter.rank_of(B, 5, 9) == 9
    assert arbiter.rank_of(A, 5, 9) == 5


def test_register_and_unknown_app():
    arbiter = shared_arbiter()
    state = arbiter.register(AppId(9), private_mem=5)
    assert state.target_mem == 5
    with pytest.raises(ConfigError):
        arbiter.register(AppId(9))
    with pytest.raises(UnknownApp):
        arbiter.state(AppId(10))
    with pytest.raises(KeyError):
        arbiter.need(AppId(10))


def test_accounting():
    arbiter = shared_arbiter()
    arbiter.record_insert(A, 20, 1)
    arbiter.record_insert(A, 30, 2)
    arbiter.record_delete(A, 20, 1)
    assert arbiter.state(A).actual_mem == 30
    assert arbiter.need(A) == pytest.approx(40 / 30)
    arbiter.record_eviction(A, key_hash(b'k'), 30, 2)
    state = arbiter.state(A)
    assert (state.actual_mem, state.evicted_items, state.evicted_bytes) == (0, 1, 30)
    assert key_hash(b'k') in state.shadow_queue
    assert arbiter.need(A) == MAXIMAL_NEED


def test_shadow_hit_moves_one_credit():
    arbiter = shared_arbiter()
    arbiter.record_eviction(A, key_hash(b'k'), 30, 2)
    report = arbiter.on_miss_credit_transfer(A, key_hash(b'k'))
    assert report.shadow_hit
    assert report.donor in (B, C)
    assert report.amount == 10
    assert arbiter.state(A).target_mem == 50
    assert arbiter.state(report.donor).target_mem == 20
    assert arbiter.total_shared() == 90
    assert arbiter.state(A).shadow_hits == 1

    # The shadow entry was consumed.
    assert arbiter.on_miss_credit_transfer(A, key_hash(b'k')).shadow_hit is False
    assert arbiter.on_miss_credit_transfer(A, key_hash(b'other')).shadow_hit is False


def test_transfer_without_donor():
    arbiter = shared_arbiter(privates=(10, 0, 0), credit=50)
    arbiter.record_eviction(A, key_hash(b'k'), 30)
    report = arbiter.on_miss_credit_transfer(A, key_hash(b'k'))
    assert report.shadow_hit
    assert report.donor is None
    assert report.amount == 0
    assert arbiter.targets_and_actuals()[A][0] == 40


def test_transfers_are_deterministic():
    donors = []
    for _ in range(2):
        arbiter = shared_arbiter(seed=7, credit=1)
        run = []
        for number in range(10):
            arbiter.record_eviction(A, key_hash(b'%d' % number), 1)
            run.append(arbiter.on_miss_credit_transfer(A, key_hash(b'%d' % number)).donor)
        donors.append(run)
    assert donors[0] == donors[1]


def test_partitioned_shadow_hit_moves_nothing():
    arbiter = Arbiter(100, 'partitioned')
    arbiter.register_initial([(A, 50, 10, LRU, 100), (B, 50, 10, LRU, 100)])
    arbiter.record_insert(A, 10, 0)
    arbiter.record_eviction(A, key_hash(b'k'), 10)
    report = arbiter.on_miss_credit_transfer(A, key_hash(b'k'))
    assert report.shadow_hit and report.donor is None
    assert arbiter.targets_and_actuals() == {A: (50, 0), B: (50, 0)}


def test_nonblocking_shadow_skips_busy_queue():
    arbiter = Arbiter(100, 'shared', nonblocking_shadow=True)
    arbiter.register_initial([(A, 0, 10, LRU, 100), (B, 0, 10, LRU, 100)])
    arbiter.record_eviction(A, key_hash(b'k'), 10)
    with arbiter.state(A).lock:
        report = arbiter.on_miss_credit_transfer(A, key_hash(b'k'))
    assert report.skipped and not report.shadow_hit
    assert arbiter.state(A).shadow_skips == 1
    assert arbiter.on_miss_credit_transfer(A, key_hash(b'k')).shadow_hit


def test_proportional_share():
    arbiter = shared_arbiter()
    assert arbiter.proportional_share(100) == pytest.approx({A: 40.0, B: 30.0, C: 30.0})


def test_idle_histogram():
    histogram = IdleHistogram(idle_time=1600)
    assert histogram.width == 100
    histogram.add(0, 50)
    histogram.add(1500, 50)
    assert histogram.total() == 100
    assert histogram.idle_bytes(2000, 1600) == 50
    histogram.move(0, 2000, 50)
    assert histogram.idle_bytes(2000, 1600) == 0


def test_idle_histogram_folds_old_slots():
    histogram = IdleHistogram(idle_time=1600)
    histogram.add(0, 50)
    assert histogram.idle_bytes(4000, 1600) == 50
    histogram.add(10, 20)
    assert histogram.idle_bytes(4000, 1600) == 70
    histogram.remove(0, 50)
    assert histogram.total() == 20


def test_set_target_idle_tax():
    arbiter = Arbiter(4000, 'idle_tax', tax_rate=0.5, idle_time=1600, tick_interval=1)
    arbiter.register_initial([(A, 1000, 10, LRU, 1000)])
    assert arbiter.state(A).target_mem == 1000
    arbiter.record_insert(A, 1000, 0)
    report = arbiter.set_target_idle_tax(A, 0.5, 1600, 2000)
    assert report.idle_mem == 1000
    assert report.active_fraction == 0.0
    assert report.tau == pytest.approx(2.0)
    assert report.target_mem == 500
    arbiter.record_access(A, 1000, 0, 2000)
    assert arbiter.set_target_idle_tax(A, 0.5, 1600, 2000).target_mem == 1000
    with pytest.raises(ConfigError):
        arbiter.set_target_idle_tax(A, -0.1, 1600, 2000)


def test_tick_runs_once_per_interval():
    arbiter = Arbiter(4000, 'idle_tax', tax_rate=0.5, idle_time=1600, tick_interval=1000)
    arbiter.register_initial([(A, 1000, 10, LRU, 1000)])
    arbiter.record_insert(A, 1000, 0)
    assert arbiter.tick(0)
    assert not arbiter.tick(999)
    assert arbiter.tick(3000)
    assert arbiter.state(A).target_mem == 500
    assert [when for when, _ in arbiter.history] == [0, 3000]


def test_auto_private_memory():
    arbiter = shared_arbiter(credit=10, privates=(0, 0, 0), total=90)
    with pytest.raises(InsufficientHistory):
        arbiter.auto_private_memory(1)
    arbiter.tick(0)
    arbiter.record_eviction(A, key_hash(b'k'), 1)
    arbiter.on_miss_credit_transfer(A, key_hash(b'k'))
    arbiter.tick(1_000_000)
    chosen = arbiter.auto_private_memory(1_000_000)
    assert chosen[A] == 35
    assert sorted((chosen[B], chosen[C])) == [25, 30]
    with pytest.raises(InsufficientHistory):
        arbiter.auto_private_memory(2_000_000)


def test_switch_to_idle_tax():
    arbiter = shared_arbiter(total=90, privates=(0, 0, 0))
    arbiter.switch_to_idle_tax({A: 50, B: 40}, now=0)
    assert arbiter.policy == 'idle_tax'
    assert arbiter.total_shared() == 0
    assert arbiter.targets_and_actuals() == {A: (50, 0), B: (40, 0), C: (0, 0)}


def test_from_config():
    config = config_from_mapping({'policy': 'partitioned', 'total_memory_bytes': '4M',
                                  'app.1.private_mem_bytes': '1M',
                                  'app.2.rank_policy': 'lfu'})
    arbiter = Arbiter.from_config(config)
    assert arbiter.targets_and_actuals() == {A: (1024 * 1024, 0), B: (3 * 1024 * 1024, 0)}
    assert arbiter.state(B).rank_spec == LFU


def test_reserved_memory_is_private_mem_capped_by_target():
    arbiter = shared_arbiter(privates=(10, 0, 0))
    assert arbiter.reserved_memory() == {A: 10, B: 0, C: 0}
    arbiter = Arbiter(4000, 'idle_tax', tax_rate=0.5, idle_time=1600, tick_interval=1)
    arbiter.register_initial([(A, 1000, 10, LRU, 1000)])
    arbiter.record_insert(A, 1000, 0)
    arbiter.set_target_idle_tax(A, 0.5, 1600, 2000)
    assert arbiter.reserved_memory() == {A: 500}


def test_history_keeps_only_the_window():
    arbiter = Arbiter(4000, 'shared', tick_interval=1000, history_window=3000)
    arbiter.register_initial([(A, 0, 10, LRU, 1000)])
    for now in range(0, 10_000, 1000):
        assert arbiter.tick(now)
    assert arbiter.history.maxlen == 5
    assert [when for when, _ in arbiter.history] == [5000, 6000, 7000, 8000, 9000]


def idle_tax_targets(idle_steps, tax_rate):
    targets = []
    for idle in idle_steps:
        arbiter = Arbiter(4000, 'idle_tax', tax_rate=tax_rate, idle_time=1600, tick_interval=1)
        arbiter.register_initial([(A, 1000, 10, LRU, 1000)])
        if idle:
            arbiter.record_insert(A, idle, 0)
        if idle < 1000:
            arbiter.record_insert(A, 1000 - idle, 2000)
        targets.append(arbiter.set_target_idle_tax(A, tax_rate, 1600, 2000).target_mem)
    return targets


@pytest.mark.parametrize('tax_rate', [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
def test_idle_tax_target_falls_as_idle_memory_grows(tax_rate):
    targets = idle_tax_targets(range(0, 1001, 100), tax_rate)
    assert targets[0] == 1000
    assert targets == sorted(targets, reverse=True)


@pytest.mark.parametrize('idle', [0, 100, 250, 500, 750, 999, 1000])
def test_idle_tax_target_falls_as_tax_rate_grows(idle):
    rates = [step / 10 for step in range(11)]
    targets = [idle_tax_targets([idle], rate)[0] for rate in rates]
    assert targets == sorted(targets, reverse=True)


@pytest.mark.parametrize('private', [0, 1, 1000, 12_345])
def test_idle_tax_target_is_monotone_on_a_grid(private):
    grid = [step / 20 for step in range(21)]
    for rate in grid:
        targets = [idle_tax_target(private, rate, 1.0 - idle) for idle in grid]
        assert targets == sorted(targets, reverse=True)
    for idle in grid:
        targets = [idle_tax_target(private, rate, 1.0 - idle) for rate in grid]
        assert targets == sorted(targets, reverse=True)
