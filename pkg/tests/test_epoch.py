#! /usr/bin/env python3.9

from memshare.epoch import EpochManager


def test_enter_exit():
    epochs = EpochManager()
    assert epochs.oldest_in_flight() is None
    first = epochs.enter()
    epochs.advance()
    second = epochs.enter()
    assert (first, second) == (0, 1)
    assert epochs.in_flight() == 2
    assert epochs.oldest_in_flight() == 0
    epochs.exit(first)
    assert epochs.oldest_in_flight() == 1
    epochs.exit(second)
    assert epochs.in_flight() == 0


def test_guard():
    epochs = EpochManager(start=5)
    with epochs.guard() as epoch:
        assert epoch == 5
        assert epochs.in_flight() == 1
    assert epochs.in_flight() == 0


def test_can_reclaim():
    epochs = EpochManager()
    assert epochs.can_reclaim(0)
    with epochs.guard():
        retired = epochs.advance()
        assert not epochs.can_reclaim(retired)
        with epochs.guard():
            assert not epochs.can_reclaim(retired)
    assert epochs.can_reclaim(retired)
    with epochs.guard():
        assert epochs.can_reclaim(retired)
