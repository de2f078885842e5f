#!/usr/bin/env python3.9
"""Ranking functions ``rank(t, f)`` deciding which records the cleaner keeps.

``t`` is the time of a record's last access, ``f`` the number of accesses since
insertion (insertion counts as the first). A higher rank means a more valuable
record, relocated before lower-ranked records of the same application.

   - LRU: ``rank(t, f) = t``
   - LFU: ``rank(t, f) = f``
   - Segmented LRU with threshold ``k``: ``rank(t, f) = (f >= k, t)``, compared
     lexicographically, so records accessed at least ``k`` times form a protected
     tier above all other records.
   - Custom: any pure function of ``(t, f)`` returning an orderable value.
"""
# Imports from standard library.
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union


# Types
# =====

RankValue = Union[int, float, tuple[Any, ...]]
RankFunction = Callable[[int, int], RankValue]


@dataclass(frozen=True)
class RankSpec:
    """Which ranking function an application uses.

    ``kind`` is one of ``lru``, ``lfu``, ``slru`` and ``custom``. ``threshold`` is
    used by ``slru`` only and ``function`` by ``custom`` only.
    """

    kind: str = 'lru'
    threshold: int = 2
    function: Optional[RankFunction] = None

    def __str__(self) -> str:
        """Print the spec in the configuration file syntax."""
        if self.kind == 'slru':
            return f'slru:{self.threshold}'
        return self.kind


LRU = RankSpec('lru')
LFU = RankSpec('lfu')


# Constructor Functions
# =====================


def segmented_lru(threshold: int) -> RankSpec:
    """Constructor-function for Segmented LRU specs.

    Raises:
       ValueError: If ``threshold < 1``.

    """
    if threshold < 1:
        raise ValueError(f'Segmented LRU threshold must be positive, got {threshold}')
    return RankSpec('slru', threshold)


def custom(function: RankFunction) -> RankSpec:
    """Constructor-function for caller-supplied ranking functions."""
    return RankSpec('custom', function=function)


def parse_rank_spec(text: str) -> RankSpec:
    """Parse ``lru``, ``lfu`` or ``slru:<threshold>``.

    Raises:
       ValueError: on anything else.

    """
    name, _, argument = text.strip().lower().partition(':')
    if name == 'lru' and not argument:
        return LRU
    if name == 'lfu' and not argument:
        return LFU
    if name == 'slru':
        try:
            return segmented_lru(int(argument) if argument else 2)
        except ValueError as error:
            raise ValueError(f'Encountered bad rank policy {text!r}: {error}') from error
    raise ValueError(f'Encountered unknown rank policy {text!r}')


# Evaluation
# ==========


def rank(last_access: int, frequency: int, spec: RankSpec) -> RankValue:
    """Evaluate ``rank(t, f)`` under ``spec``.

    Args:
       last_access (:obj:`int`): ``t``, the time of the last access.
       frequency (:obj:`int`): ``f``, the number of accesses.
       spec (:obj:`RankSpec`)

    Return:
       An orderable value; larger means kept longer.

    Raises:
       ValueError: If ``spec`` is a custom spec without a function, or unknown.

    """
    if spec.kind == 'lru':
        return last_access
    if spec.kind == 'lfu':
        return frequency
    if spec.kind == 'slru':
        return (1 if frequency >= spec.threshold else 0, last_access)
    if spec.kind == 'custom' and spec.function is not None:
        return spec.function(last_access, frequency)
    raise ValueError(f'Encountered unusable rank spec {spec!r}')
