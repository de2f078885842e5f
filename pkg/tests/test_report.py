#! /usr/bin/env python3.9

import csv
import pytest
from memshare.config import config_from_mapping
from memshare.errors import UsageError
from memshare.experiment import CleanBenchRow, ReplayOptions, run_experiment
from memshare.report import (clean_bench_table, COMBINED, compare, load_summary, report,
                             series_rows, SERIES_COLUMNS, SUMMARY_COLUMNS, summary_rows,
                             write_clean_bench, write_comparison)
from memshare.segment import AppId
from memshare.trace import GET, SET, TraceRecord

A, B = AppId(1), AppId(2)


def config(**settings):
    mapping = {'total_memory_bytes': '64K', 'segment_size_bytes': '4K', 'metrics_window': 1.0,
               'app.1.credit_size_bytes': '1K', 'app.2.credit_size_bytes': '1K'}
    mapping.update(settings)
    return config_from_mapping(mapping)


TRACE = [TraceRecord(0, SET, A, 'a', 10), TraceRecord(100, GET, A, 'a', 10),
         TraceRecord(200, GET, A, 'b', 10), TraceRecord(1_200_000, GET, B, 'a', 10)]


def result(label='run', **settings):
    return run_experiment(config(**settings), TRACE, ReplayOptions(label=label))


def test_series_rows():
    rows = series_rows(result())
    assert {row[3] for row in rows if row[2] == '1'} == {
        'gets', 'hits', 'hit_rate', 'shadow_hit_rate', 'occupancy', 'target'}
    assert ('run', 1_000_000, '1', 'hits', '1') in rows
    assert ('run', 1_000_000, '1', 'hit_rate', '0.500000') in rows
    assert ('run', 2_000_000, COMBINED, 'gets', '1') in rows
    assert any(row[2] == COMBINED and row[3] == 'cleaner_bandwidth' for row in rows)


def test_summary_rows():
    rows = summary_rows(result())
    assert [row['app'] for row in rows] == ['1', '2', COMBINED]
    assert rows[0]['hit_rate'] == 0.5
    assert rows[-1]['gets'] == 3
    assert rows[-1]['misses'] == 2
    assert all(row['miss_reduction'] is None for row in rows)

    baseline = result('base', engine='slab_greedy')
    rows = summary_rows(result(), baseline)
    assert rows[0]['miss_reduction'] == 0.0
    assert rows[-1]['miss_reduction'] == 0.0


def test_report_files(tmp_path):
    paths = report([result()], tmp_path / 'out')
    assert [p.name for p in paths] == ['series.csv', 'summary.csv', 'summary.txt']
    with open(paths[0], newline='') as stream:
        assert tuple(next(csv.reader(stream))) == SERIES_COLUMNS
    with open(paths[1], newline='') as stream:
        rows = list(csv.DictReader(stream))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert rows[0]['hit_rate'] == '0.500000'
    assert rows[0]['miss_reduction'] == ''
    assert 'hit_rate' in paths[2].read_text()


def test_report_is_byte_identical_across_runs(tmp_path):
    report([result()], tmp_path / 'first')
    report([result()], tmp_path / 'second')
    for name in ('series.csv', 'summary.csv', 'summary.txt'):
        assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()


def test_report_needs_results(tmp_path):
    with pytest.raises(UsageError):
        report([], tmp_path)


def test_load_summary_and_compare(tmp_path):
    report([result('base', engine='slab_greedy')], tmp_path / 'base')
    report([result('cand')], tmp_path / 'cand')
    baseline = load_summary(tmp_path / 'base' / 'summary.csv')
    candidate = load_summary(tmp_path / 'cand' / 'summary.csv')
    assert candidate[0] == {'run': 'cand', 'app': '1', 'gets': 2, 'hits': 1, 'misses': 1,
                            'hit_rate': 0.5, 'shadow_hits': 0, 'miss_reduction': None}
    compared = compare(baseline, candidate)
    assert [row['miss_reduction'] for row in compared] == [0.0, 0.0, 0.0]
    paths = write_comparison(compared, tmp_path / 'cmp')
    assert load_summary(paths[0])[0]['miss_reduction'] == 0.0
    with pytest.raises(UsageError):
        compare([], candidate)


def test_compare_computes_reduction():
    baseline = [{'run': 'b', 'app': COMBINED, 'gets': 10, 'hits': 5, 'misses': 5,
                 'hit_rate': 0.5, 'shadow_hits': 0, 'miss_reduction': None}]
    candidate = [dict(baseline[0], run='c', hits=8, misses=2, hit_rate=0.8),
                 dict(baseline[0], run='c', app='9')]
    compared = compare(baseline, candidate)
    assert compared[0]['miss_reduction'] == pytest.approx(0.6)
    assert compared[1]['miss_reduction'] is None


def test_clean_bench_files(tmp_path):
    rows = [CleanBenchRow(1, 0.5, 1000.0, 2.0e6, 10), CleanBenchRow(20, 0.6, 500.0, 1.0e6, 3)]
    assert 'relocated_per_freed' in clean_bench_table(rows)
    paths = write_clean_bench(rows, tmp_path)
    lines = paths[0].read_text().splitlines()
    assert lines[0] == 'segments_per_pass,hit_rate,relocated_per_freed_segment,' \
                       'cleaner_bandwidth,passes'
    assert lines[1] == '1,0.500000,1000.000000,2000000.000000,10'
