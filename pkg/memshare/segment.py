#!/usr/bin/env python3.9
"""Segments of the in-memory log and the records packed inside them.

Record Layout
=============
A segment is a fixed-size byte arena. Records are appended back to back, each one
self-describing so that a segment can be scanned without consulting the index::

   +--------+---------+-----------+-------------+-----------+-----+-------+
   | app id | key len | value len | last access | frequency | key | value |
   |  u32   |   u16   |    u32    |     u64     |    u32    |     |       |
   +--------+---------+-----------+-------------+-----------+-----+-------+

All integers are little-endian. The header is `RECORD_HEADER` bytes. Only the last
access time and the frequency are ever rewritten in place; the key and value bytes
of a record never change once written.

The per-segment header (record count and retire epoch) is kept on the `Segment`
object next to the arena rather than inside it, so the first record of a segment
starts at offset zero.
"""
# Imports from standard library.
from collections import Counter
import enum
import struct
from typing import Final, Iterator, NamedTuple, NewType, Optional


# Classes and Types
# =================

AppId = NewType('AppId', int)
AppId.__doc__ = """`AppId` is a subtype of `int`, a non-negative application id."""

SegmentId = NewType('SegmentId', int)
SegmentId.__doc__ = """`SegmentId` is a subtype of `int`, the index of a segment."""

_HEADER: Final = struct.Struct('<IHIQI')
#: Bytes of header in front of every record.
RECORD_HEADER: Final = _HEADER.size
#: Offset of the (last access, frequency) pair inside a record header.
_ACCESS_OFFSET: Final = 10
_ACCESS: Final = struct.Struct('<QI')

MAX_KEY_BYTES: Final = 0xFFFF
#: Bytes of a segment not available to records.
SEGMENT_OVERHEAD: Final = 0


class SegmentState(enum.Enum):
    """Life cycle of a segment: Free -> Head -> Sealed -> Cleaning -> Retired -> Free."""

    FREE = 'free'
    HEAD = 'head'
    SEALED = 'sealed'
    CLEANING = 'cleaning'
    RETIRED = 'retired'


class LogLocation(NamedTuple):
    """Where a record lives: a segment and a byte offset inside it."""

    segment_id: SegmentId
    offset: int


class RecordHeader(NamedTuple):
    """The fixed-size header of a record."""

    app_id: AppId
    key_len: int
    value_len: int
    last_access: int
    frequency: int

    @property
    def total_size(self) -> int:
        """Header plus key plus value bytes."""
        return RECORD_HEADER + self.key_len + self.value_len


class ObjectRecord(NamedTuple):
    """One cached item as laid out in a segment."""

    app_id: AppId
    key: bytes
    value: bytes
    last_access: int
    frequency: int

    @property
    def total_size(self) -> int:
        """Header plus key plus value bytes."""
        return record_size(len(self.key), len(self.value))

    def encode(self) -> bytes:
        """Serialize the record in the segment layout."""
        return (_HEADER.pack(self.app_id, len(self.key), len(self.value),
                             self.last_access, self.frequency)
                + self.key + self.value)


# Constructor Functions
# =====================


def app_id(non_negative_int: int) -> AppId:
    """Constructor-function for AppId type.

    Raises:
       ValueError: If ``non_negative_int`` is negative or does not fit 32 bits.

    """
    if not 0 <= non_negative_int < 2**32:
        raise ValueError(f'Application ids are 32-bit non-negative integers, '
                         f'got {non_negative_int}')
    return AppId(non_negative_int)


def record_size(key_len: int, value_len: int) -> int:
    """Return the number of bytes a record with these lengths occupies."""
    return RECORD_HEADER + key_len + value_len


def object_record(app: AppId, key: bytes, value: bytes, now: int) -> ObjectRecord:
    """Build a freshly inserted record. Insertion counts as the first access.

    Raises:
       ValueError: If the key is empty or longer than `MAX_KEY_BYTES`.

    """
    if not key:
        raise ValueError('Encountered empty key')
    if len(key) > MAX_KEY_BYTES:
        raise ValueError(f'Key of {len(key)} bytes exceeds {MAX_KEY_BYTES} bytes')
    return ObjectRecord(app, bytes(key), bytes(value), now, 1)


# Segments
# ========


class Segment:  # pylint: disable=too-many-instance-attributes
    """A fixed-size arena holding contiguously packed records.

    ``live_bytes`` and ``live_by_app`` are maintained by the log store as records
    become reachable from (or unreachable from) the index; the segment itself does
    not know which of its records are live.
    """

    def __init__(self, segment_id: SegmentId, capacity: int):
        self.segment_id = segment_id
        self.capacity = capacity
        self.data = bytearray(capacity)
        self.write_offset: int = 0
        self.state = SegmentState.FREE
        self.live_bytes: int = 0
        self.live_by_app: Counter[AppId] = Counter()
        self.record_count: int = 0
        self.retire_epoch: Optional[int] = None

    def __repr__(self) -> str:
        """Print the segment in a compact way."""
        return (f'<Segment {self.segment_id} {self.state.value} '
                f'{self.write_offset}/{self.capacity} live={self.live_bytes}>')

    @property
    def free_space(self) -> int:
        """Bytes left after the write offset."""
        return self.capacity - SEGMENT_OVERHEAD - self.write_offset

    def fits(self, size: int) -> bool:
        """Return True iff a record of ``size`` bytes fits after the write offset."""
        return size <= self.free_space

    def write(self, payload: bytes) -> int:
        """Append already-encoded record bytes and return their offset."""
        assert self.fits(len(payload)), f'{len(payload)} bytes do not fit in {self}'
        offset: int = self.write_offset
        self.data[offset:offset + len(payload)] = payload
        self.write_offset += len(payload)
        self.record_count += 1
        return offset

    def header_at(self, offset: int) -> RecordHeader:
        """Decode the header of the record at ``offset``."""
        fields = _HEADER.unpack_from(self.data, offset)
        return RecordHeader(AppId(fields[0]), *fields[1:])

    def key_at(self, offset: int, header: Optional[RecordHeader] = None) -> bytes:
        """Return the key bytes of the record at ``offset``."""
        header = header or self.header_at(offset)
        start: int = offset + RECORD_HEADER
        return bytes(self.data[start:start + header.key_len])

    def record_at(self, offset: int) -> ObjectRecord:
        """Decode the whole record at ``offset``."""
        header: RecordHeader = self.header_at(offset)
        key_start: int = offset + RECORD_HEADER
        value_start: int = key_start + header.key_len
        return ObjectRecord(header.app_id,
                            bytes(self.data[key_start:value_start]),
                            bytes(self.data[value_start:value_start + header.value_len]),
                            header.last_access,
                            header.frequency)

    def raw_at(self, offset: int, size: int) -> bytes:
        """Copy ``size`` raw bytes starting at ``offset``."""
        return bytes(self.data[offset:offset + size])

    def touch(self, offset: int, now: int) -> tuple[int, int]:
        """Record an access: ``t = max(t, now)``, ``f += 1``. Return the old ``(t, f)``."""
        last_access, frequency = _ACCESS.unpack_from(self.data, offset + _ACCESS_OFFSET)
        _ACCESS.pack_into(self.data, offset + _ACCESS_OFFSET,
                          max(last_access, now), min(frequency + 1, 0xFFFFFFFF))
        return last_access, frequency

    def scan(self) -> Iterator[tuple[int, RecordHeader]]:
        """Yield ``(offset, header)`` for every record ever written here."""
        offset: int = 0
        while offset < self.write_offset:
            header: RecordHeader = self.header_at(offset)
            yield offset, header
            offset += header.total_size

    def reset(self) -> None:
        """Forget every record and return to the Free state."""
        self.write_offset = 0
        self.live_bytes = 0
        self.live_by_app.clear()
        self.record_count = 0
        self.retire_epoch = None
        self.state = SegmentState.FREE
