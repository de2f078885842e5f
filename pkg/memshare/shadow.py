#!/usr/bin/env python3.9
"""Shadow queues: bounded records of recently evicted items.

A shadow queue holds only the 64-bit hash of each evicted key and the length of the
evicted item. A GET miss whose key hash is found in the application's shadow queue
would have been a hit with a little more memory; these shadow hits drive credit
transfers. Hash collisions are tolerated: they can only over-count shadow hits.
"""
# Imports from standard library.
from collections import OrderedDict
import hashlib
from typing import Final, NewType, Optional


KeyHash = NewType('KeyHash', int)
KeyHash.__doc__ = """`KeyHash` is a subtype of `int`, a 64-bit key digest."""

#: Bookkeeping bytes per entry: an 8 B hash and an 8 B length.
ENTRY_OVERHEAD: Final = 16


def key_hash(key: bytes) -> KeyHash:
    """Return a 64-bit hash of ``key`` that is stable across processes and platforms."""
    return KeyHash(int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), 'little'))


class ShadowQueue:
    """A FIFO of ``(key hash, length)`` pairs bounded by the bytes they represent.

    Pushing a hash that is already present moves it to the young end. When the
    represented bytes exceed ``capacity_bytes`` the oldest entries are dropped.
    """

    def __init__(self, capacity_bytes: int = 10 * 1024 * 1024):
        self.capacity_bytes = capacity_bytes
        self.represented_bytes: int = 0
        self._entries: OrderedDict[KeyHash, int] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: object) -> bool:
        return digest in self._entries

    def __repr__(self) -> str:
        """Print occupancy in a compact way."""
        return f'<ShadowQueue {len(self)} entries {self.represented_bytes}/{self.capacity_bytes} B>'

    @property
    def overhead_bytes(self) -> int:
        """Memory the queue itself needs for its entries."""
        return len(self._entries) * ENTRY_OVERHEAD

    def push(self, digest: KeyHash, length: int) -> int:
        """Record an eviction. Return how many old entries were dropped."""
        previous: Optional[int] = self._entries.pop(digest, None)
        if previous is not None:
            self.represented_bytes -= previous
        self._entries[digest] = length
        self.represented_bytes += length
        dropped: int = 0
        while self.represented_bytes > self.capacity_bytes and self._entries:
            _, oldest = self._entries.popitem(last=False)
            self.represented_bytes -= oldest
            dropped += 1
        return dropped

    def take(self, digest: KeyHash) -> Optional[int]:
        """Remove ``digest`` if present. Return its recorded length, or None."""
        length: Optional[int] = self._entries.pop(digest, None)
        if length is not None:
            self.represented_bytes -= length
        return length

    def entries(self) -> list[tuple[KeyHash, int]]:
        """Return the entries oldest first."""
        return list(self._entries.items())
