#!/usr/bin/env python3.9
"""Exceptions raised across memshare.

Every exception derives from `MemshareError` and also from the builtin exception a
caller would naturally catch (`ValueError` for bad input, `KeyError` for unknown
applications, and so on).
"""
from typing import Optional


class MemshareError(Exception):
    """Root of the memshare exception hierarchy."""


class ConfigError(MemshareError, ValueError):
    """A configuration key is missing, malformed or out of range."""


class OversizeObject(MemshareError, ValueError):
    """A record does not fit in a single segment (or slab)."""


class OutOfMemory(MemshareError, MemoryError):
    """No free memory could be found for an allocation."""


class UnknownApp(MemshareError, KeyError):
    """A data-path operation named an application that was never registered."""


class NotEnoughSegments(MemshareError, RuntimeError):
    """Fewer than two sealed segments are available for a cleaning pass."""


class InsufficientHistory(MemshareError, ValueError):
    """The requested averaging window exceeds the recorded target history."""


class InvalidSpec(MemshareError, ValueError):
    """A workload specification is inconsistent."""


class UsageError(MemshareError, ValueError):
    """A harness entry point was called with arguments it cannot use."""


class TraceError(MemshareError, ValueError):
    """Base class of trace parsing errors. Carries the offending line number."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        prefix: str = f'line {line_number}: ' if line_number is not None else ''
        super().__init__(prefix + message)


class MalformedLine(TraceError):
    """A trace line does not follow the ``ts,op,app,key,size`` format."""


class NonMonotonicTimestamp(TraceError):
    """A trace line has a timestamp smaller than the line before it."""


class ProtocolError(MemshareError, ValueError):
    """A wire command could not be parsed. Answered with ``ERROR``."""


class ClientError(ProtocolError):
    """A wire command was understood but is invalid. Answered with ``CLIENT_ERROR``."""
