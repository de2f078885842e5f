#!/usr/bin/env python3.9
"""Files describing experiment results.

Output Files
============
   - ``series.csv``: long format, one row per (run, window end, app, metric). The
     app column is ``all`` for combined metrics. Metrics are ``gets``, ``hits``,
     ``hit_rate``, ``shadow_hit_rate``, ``occupancy``, ``target`` and, combined
     only, ``cleaner_bandwidth``.
   - ``summary.csv``: one row per application and run plus one ``all`` row per run
     with hit rates and, when a baseline was declared, the miss reduction.
   - ``summary.txt``: the same summary as a table for people.

Floats are written with a fixed number of digits, so identical results produce
byte-identical files.
"""
# Imports from standard library.
import csv
from pathlib import Path
from typing import Any, Final, Optional, Sequence, Union
# Imports from third-party modules.
from loguru import logger
from tabulate import tabulate
# Imports from local modules.
from memshare.engine import hit_rate, miss_reduction
from memshare.errors import UsageError
from memshare.experiment import CleanBenchRow, ExperimentResult

SERIES_COLUMNS: Final = ('run', 'window_end', 'app', 'metric', 'value')
SUMMARY_COLUMNS: Final = ('run', 'app', 'gets', 'hits', 'misses', 'hit_rate',
                          'shadow_hits', 'miss_reduction')
COMBINED: Final = 'all'


def _number(value: Union[int, float, None]) -> str:
    if value is None:
        return ''
    if isinstance(value, int):
        return str(value)
    return f'{value:.6f}'


# Rows
# ====


def series_rows(result: ExperimentResult) -> list[tuple[str, int, str, str, str]]:
    """Return the long-format rows of every window of ``result``."""
    rows: list[tuple[str, int, str, str, str]] = []
    for sample in result.windows:
        for app in result.apps:
            gets: int = sample.gets[app]
            for metric, value in (('gets', gets), ('hits', sample.hits[app]),
                                  ('hit_rate', hit_rate(sample.hits[app], gets)),
                                  ('shadow_hit_rate', hit_rate(sample.shadow_hits[app], gets)),
                                  ('occupancy', sample.occupancy[app]),
                                  ('target', sample.target[app])):
                rows.append((result.label, sample.end, str(app), metric, _number(value)))
        gets = sum(sample.gets.values())
        hits: int = sum(sample.hits.values())
        for metric, value in (('gets', gets), ('hits', hits), ('hit_rate', hit_rate(hits, gets)),
                              ('occupancy', sum(sample.occupancy.values())),
                              ('cleaner_bandwidth', sample.cleaner_bandwidth)):
            rows.append((result.label, sample.end, COMBINED, metric, _number(value)))
    return rows


def summary_rows(result: ExperimentResult,
                 baseline: Optional[ExperimentResult] = None) -> list[dict[str, Any]]:
    """Return one row per application plus the combined row.

    The miss reduction of a row compares its miss rate to the same row of
    ``baseline`` (or of ``result.final``'s own baseline for the combined row).
    """
    rows: list[dict[str, Any]] = []
    for app in result.apps:
        stats = result.final.apps[app]
        reduction: Optional[float] = None
        if baseline is not None and app in baseline.final.apps:
            base = baseline.final.apps[app]
            reduction = miss_reduction(1.0 - stats.hit_rate if stats.gets else 0.0,
                                       1.0 - base.hit_rate if base.gets else 0.0)
        rows.append({'run': result.label, 'app': str(app), 'gets': stats.gets,
                     'hits': stats.hits, 'misses': stats.misses, 'hit_rate': stats.hit_rate,
                     'shadow_hits': stats.shadow_hits, 'miss_reduction': reduction})
    final = result.final
    combined: Optional[float] = final.miss_reduction
    if baseline is not None:
        combined = miss_reduction(final.miss_rate, baseline.final.miss_rate)
    rows.append({'run': result.label, 'app': COMBINED, 'gets': final.gets, 'hits': final.hits,
                 'misses': final.gets - final.hits, 'hit_rate': final.combined_hit_rate,
                 'shadow_hits': sum(a.shadow_hits for a in final.apps.values()),
                 'miss_reduction': combined})
    return rows


# Files
# =====


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    with open(path, 'w', newline='', encoding='utf-8') as stream:
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(columns)
        writer.writerows(rows)
    logger.debug(f'wrote {len(rows)} rows to {path}')
    return path


def summary_table(rows: Sequence[dict[str, Any]]) -> str:
    """Render summary rows as a plain-text table."""
    return tabulate([[row[c] if not isinstance(row[c], float) else _number(row[c])
                      for c in SUMMARY_COLUMNS] for row in rows],
                    headers=SUMMARY_COLUMNS, tablefmt='simple')


def report(results: Sequence[ExperimentResult], out_dir: Union[str, Path],
           baseline: Optional[ExperimentResult] = None) -> list[Path]:
    """Write ``series.csv``, ``summary.csv`` and ``summary.txt`` for ``results``.

    Args:
       results (:obj:`Sequence[ExperimentResult]`): at least one result.
       out_dir (:obj:`str` or :obj:`Path`): created if missing.
       baseline (:obj:`ExperimentResult`, optional): fills the miss-reduction column.

    Return:
       The paths written.

    Raises:
       UsageError: if ``results`` is empty.
       OSError: if the files cannot be written.

    """
    if not results:
        raise UsageError('report needs at least one result')
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    series: list[tuple[str, int, str, str, str]] = []
    summary: list[dict[str, Any]] = []
    for result in results:
        series.extend(series_rows(result))
        summary.extend(summary_rows(result, baseline))
    paths: list[Path] = [
        _write_csv(directory / 'series.csv', SERIES_COLUMNS, series),
        _write_csv(directory / 'summary.csv', SUMMARY_COLUMNS,
                   [[r['run'], r['app'], r['gets'], r['hits'], r['misses'],
                     _number(r['hit_rate']), r['shadow_hits'], _number(r['miss_reduction'])]
                    for r in summary])]
    text_path: Path = directory / 'summary.txt'
    text_path.write_text(summary_table(summary) + '\n', encoding='utf-8')
    paths.append(text_path)
    logger.info(f'Report written to {directory}')
    return paths


def load_summary(path: Union[str, Path]) -> list[dict[str, Any]]:
    """Read a ``summary.csv`` back with typed columns.

    Raises:
       OSError: if the file cannot be read.
       ValueError: if a column is missing or not numeric.

    """
    rows: list[dict[str, Any]] = []
    with open(path, newline='', encoding='utf-8') as stream:
        for raw in csv.DictReader(stream):
            rows.append({'run': raw['run'], 'app': raw['app'], 'gets': int(raw['gets']),
                         'hits': int(raw['hits']), 'misses': int(raw['misses']),
                         'hit_rate': float(raw['hit_rate']),
                         'shadow_hits': int(raw['shadow_hits']),
                         'miss_reduction': (float(raw['miss_reduction'])
                                            if raw['miss_reduction'] else None)})
    return rows


def compare(baseline_rows: Sequence[dict[str, Any]],
            candidate_rows: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Recompute the miss-reduction column of a candidate summary against a baseline.

    Rows are matched by app; a baseline holding several runs uses its first run.
    """
    if not baseline_rows or not candidate_rows:
        raise UsageError('compare needs a non-empty baseline and candidate summary')
    first_run: str = baseline_rows[0]['run']
    base: dict[str, dict[str, Any]] = {r['app']: r for r in baseline_rows if r['run'] == first_run}
    compared: list[dict[str, Any]] = []
    for row in candidate_rows:
        reduction: Optional[float] = None
        if row['app'] in base:
            reference = base[row['app']]
            reduction = miss_reduction(row['misses'] / row['gets'] if row['gets'] else 0.0,
                                       reference['misses'] / reference['gets']
                                       if reference['gets'] else 0.0)
        compared.append(dict(row, miss_reduction=reduction))
    return compared


def write_comparison(rows: Sequence[dict[str, Any]], out_dir: Union[str, Path]) -> list[Path]:
    """Write a comparison as ``summary.csv`` and ``summary.txt`` in ``out_dir``."""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path: Path = _write_csv(directory / 'summary.csv', SUMMARY_COLUMNS,
                                [[r['run'], r['app'], r['gets'], r['hits'], r['misses'],
                                  _number(r['hit_rate']), r['shadow_hits'],
                                  _number(r['miss_reduction'])] for r in rows])
    text_path: Path = directory / 'summary.txt'
    text_path.write_text(summary_table(rows) + '\n', encoding='utf-8')
    return [csv_path, text_path]


def clean_bench_table(rows: Sequence[CleanBenchRow]) -> str:
    """Render cleaner benchmark rows as a plain-text table."""
    return tabulate([[r.segments_per_pass, _number(r.hit_rate),
                      _number(r.relocated_per_freed_segment), _number(r.cleaner_bandwidth),
                      r.passes] for r in rows],
                    headers=('n', 'hit_rate', 'relocated_per_freed', 'bandwidth_Bps', 'passes'))


def write_clean_bench(rows: Sequence[CleanBenchRow], out_dir: Union[str, Path]) -> list[Path]:
    """Write cleaner benchmark rows as ``clean_bench.csv`` and ``clean_bench.txt``."""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path: Path = _write_csv(directory / 'clean_bench.csv', CleanBenchRow._fields,
                                [[r.segments_per_pass, _number(r.hit_rate),
                                  _number(r.relocated_per_freed_segment),
                                  _number(r.cleaner_bandwidth), r.passes] for r in rows])
    text_path: Path = directory / 'clean_bench.txt'
    text_path.write_text(clean_bench_table(rows) + '\n', encoding='utf-8')
    return [csv_path, text_path]
