#! /usr/bin/env python3.9

import pytest
from memshare.rank import (custom, LFU, LRU, parse_rank_spec, rank, RankSpec, segmented_lru)


def test_parse_rank_spec():
    assert parse_rank_spec('lru') == LRU
    assert parse_rank_spec(' LFU ') == LFU
    assert parse_rank_spec('slru') == segmented_lru(2)
    assert parse_rank_spec('slru:4') == segmented_lru(4)
    assert str(parse_rank_spec('slru:4')) == 'slru:4'
    for text in ('mru', 'lru:2', 'slru:0', 'slru:x'):
        with pytest.raises(ValueError):
            parse_rank_spec(text)


def test_rank():
    assert rank(10, 3, LRU) == 10
    assert rank(10, 3, LFU) == 3
    assert rank(10, 3, custom(lambda t, f: t * f)) == 30


def test_segmented_lru_tiers():
    spec = segmented_lru(2)
    assert rank(100, 1, spec) < rank(5, 2, spec)
    assert rank(5, 2, spec) < rank(6, 9, spec)
    assert rank(5, 1, spec) < rank(6, 1, spec)


def test_unusable_spec():
    with pytest.raises(ValueError):
        rank(1, 1, RankSpec('custom'))
    with pytest.raises(ValueError):
        rank(1, 1, RankSpec('mru'))
