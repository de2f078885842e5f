#!/usr/bin/env python3.9
"""Request traces: one request per line as ``timestamp,op,app,key,size``.

   - ``timestamp`` is in microseconds and must not decrease within a file.
   - ``op`` is ``GET``, ``SET`` or ``DEL`` (case-insensitive).
   - ``app`` is a non-negative application id.
   - ``key`` is any text without commas or whitespace.
   - ``size`` is the value length in bytes. GETs carry the size the harness stores
     on a miss when fill-on-miss is enabled.

Lines starting with ``#`` and blank lines are ignored.
"""
# Imports from standard library.
from pathlib import Path
from typing import Final, Iterable, Iterator, NamedTuple, Optional, Union
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.errors import MalformedLine, NonMonotonicTimestamp
from memshare.segment import AppId

GET: Final = 'GET'
SET: Final = 'SET'
DEL: Final = 'DEL'
OPS: Final = (GET, SET, DEL)


class TraceRecord(NamedTuple):
    """One request of a trace."""

    timestamp: int
    op: str
    app_id: AppId
    key: str
    size: int

    def to_line(self) -> str:
        """Render the record in the trace file syntax."""
        return f'{self.timestamp},{self.op},{self.app_id},{self.key},{self.size}'


def parse_line(line: str, line_number: Optional[int] = None) -> TraceRecord:
    """Parse one non-comment trace line.

    Raises:
       MalformedLine: on a wrong field count, a bad number, an unknown op or an
          empty key.

    """
    fields: list[str] = [field.strip() for field in line.strip().split(',')]
    if len(fields) != 5:
        raise MalformedLine(f'expected 5 fields, got {len(fields)}: {line.strip()!r}',
                            line_number)
    stamp, op, app, key, size = fields
    op = op.upper()
    if op not in OPS:
        raise MalformedLine(f'unknown op {op!r}', line_number)
    if not key or any(c.isspace() for c in key):
        raise MalformedLine(f'bad key {key!r}', line_number)
    try:
        timestamp: int = int(stamp)
        app_number: int = int(app)
        length: int = int(size)
    except ValueError as error:
        raise MalformedLine(f'bad number in {line.strip()!r}', line_number) from error
    if timestamp < 0 or app_number < 0 or length < 0:
        raise MalformedLine(f'negative field in {line.strip()!r}', line_number)
    return TraceRecord(timestamp, op, AppId(app_number), key, length)


def iter_trace(lines: Iterable[str]) -> Iterator[TraceRecord]:
    """Parse trace lines lazily, checking that timestamps never decrease.

    Raises:
       MalformedLine: see `parse_line`.
       NonMonotonicTimestamp: if a timestamp is smaller than the one before it.

    """
    previous: int = 0
    for number, line in enumerate(lines, start=1):
        content: str = line.strip()
        if not content or content.startswith('#'):
            continue
        record: TraceRecord = parse_line(content, number)
        if record.timestamp < previous:
            raise NonMonotonicTimestamp(f'timestamp {record.timestamp} after {previous}',
                                        number)
        previous = record.timestamp
        yield record


def parse_trace(path: Union[str, Path]) -> Iterator[TraceRecord]:
    """Stream the records of a trace file.

    Raises:
       OSError: if the file cannot be opened.
       MalformedLine, NonMonotonicTimestamp: see `iter_trace`.

    """
    logger.info(f'Reading trace {path}')
    with open(path, encoding='utf-8') as stream:
        yield from iter_trace(stream)


def write_trace(records: Iterable[TraceRecord], path: Union[str, Path]) -> int:
    """Write records to a trace file. Return how many were written."""
    count: int = 0
    with open(path, 'w', encoding='utf-8') as stream:
        stream.write('# timestamp,op,app,key,size\n')
        for record in records:
            stream.write(record.to_line() + '\n')
            count += 1
    logger.info(f'Wrote {count} records to {path}')
    return count
