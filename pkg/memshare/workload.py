#!/usr/bin/env python3.9
"""Synthetic multi-application workloads.

Workload Spec Format
====================
A JSON document::

   {"duration": 600, "seed": 7,
    "apps": [{"app_id": 1, "keys": 5000, "rate": 200, "get_fraction": 0.9,
              "size": {"kind": "two_point", "small": 56, "large": 576,
                       "large_fraction": 0.05},
              "popularity": {"kind": "zipf", "theta": 0.99},
              "bursts": [{"start": 100, "duration": 50, "multiplier": 10}]}]}

``duration``, ``start`` and burst ``duration`` are in seconds, ``rate`` is in
requests per second. Sizes describe whole items (record header, key and value),
so a 56 B item is stored in exactly 56 bytes of log memory.

Generation
==========
Each application draws from its own ``numpy.random.default_rng((seed, app_id))``
stream, so adding an application does not perturb the others. Arrivals are a
Poisson process whose rate is multiplied inside burst windows: the timeline is cut
at burst boundaries and every piece receives a Poisson number of uniformly placed
requests. Zipfian key ranks are drawn by inverse transform sampling on the
normalized cumulative weights ``1/k**theta``. Every key has one fixed size, drawn
once. The per-application streams are merged by timestamp.
"""
# Imports from standard library.
from dataclasses import dataclass, field
import heapq
import json
from pathlib import Path
from typing import Any, Final, Iterator, Optional, Union
# Imports from third-party modules.
from loguru import logger
import numpy as np
# Imports from local modules.
from memshare.errors import InvalidSpec
from memshare.segment import AppId, RECORD_HEADER
from memshare.trace import GET, SET, TraceRecord

SIZE_KINDS: Final = ('constant', 'uniform', 'two_point')
POPULARITY_KINDS: Final = ('zipf', 'uniform')


# Classes and Types
# =================


@dataclass(frozen=True)
class SizeDistribution:
    """Item sizes: ``constant`` (``small``), ``uniform`` on ``[small, large]`` or
    ``two_point`` (``large`` with probability ``large_fraction``, else ``small``)."""

    kind: str = 'constant'
    small: int = 100
    large: int = 100
    large_fraction: float = 0.0


@dataclass(frozen=True)
class Popularity:
    """Key popularity: ``zipf`` with exponent ``theta`` or ``uniform``."""

    kind: str = 'zipf'
    theta: float = 0.99


@dataclass(frozen=True)
class Burst:
    """Multiply the request rate by ``multiplier`` during ``[start, start + duration)``."""

    start: float
    duration: float
    multiplier: float


@dataclass(frozen=True)
class AppWorkload:  # pylint: disable=too-many-instance-attributes
    """The request stream of one application."""

    app_id: AppId
    keys: int
    rate: float
    get_fraction: float = 0.9
    size: SizeDistribution = SizeDistribution()
    popularity: Popularity = Popularity()
    bursts: tuple[Burst, ...] = ()

    def key_name(self, index: int) -> str:
        """Return the trace key of the key with popularity rank ``index``."""
        return f'a{self.app_id}k{index:08d}'


@dataclass(frozen=True)
class WorkloadSpec:
    """A complete workload: its applications, its length and its seed."""

    duration: float
    apps: tuple[AppWorkload, ...] = field(default_factory=tuple)
    seed: int = 0


# Validation and Loading
# ======================


def validate_spec(spec: WorkloadSpec) -> WorkloadSpec:
    """Check a spec. Return it unchanged.

    Raises:
       InvalidSpec: on the first violated constraint.

    """
    def check(condition: bool, message: str) -> None:
        if not condition:
            raise InvalidSpec(message)

    check(spec.duration > 0, f'duration must be positive, got {spec.duration}')
    check(bool(spec.apps), 'a workload needs at least one application')
    check(len({a.app_id for a in spec.apps}) == len(spec.apps), 'duplicate app ids')
    for app in spec.apps:
        prefix: str = f'app {app.app_id}'
        check(app.keys >= 1, f'{prefix}: keys must be at least 1')
        check(app.rate > 0, f'{prefix}: rate must be positive')
        check(0.0 <= app.get_fraction <= 1.0, f'{prefix}: get_fraction not in [0, 1]')
        check(app.size.kind in SIZE_KINDS, f'{prefix}: unknown size kind {app.size.kind!r}')
        check(0 < app.size.small <= app.size.large or app.size.kind == 'constant',
              f'{prefix}: need 0 < small <= large')
        check(app.size.small >= RECORD_HEADER + len(app.key_name(app.keys - 1)),
              f'{prefix}: item size {app.size.small} cannot hold header and key')
        check(0.0 <= app.size.large_fraction <= 1.0, f'{prefix}: large_fraction not in [0, 1]')
        check(app.popularity.kind in POPULARITY_KINDS,
              f'{prefix}: unknown popularity {app.popularity.kind!r}')
        check(app.popularity.theta >= 0, f'{prefix}: theta must be non-negative')
        for burst in app.bursts:
            check(burst.duration > 0 and burst.multiplier > 0 and burst.start >= 0,
                  f'{prefix}: bad burst {burst}')
    return spec


def spec_from_mapping(document: dict[str, Any]) -> WorkloadSpec:
    """Build and validate a `WorkloadSpec` from a decoded JSON document.

    Raises:
       InvalidSpec: on missing or ill-typed fields.

    """
    try:
        apps: list[AppWorkload] = []
        for entry in document['apps']:
            size: dict[str, Any] = dict(entry.get('size', {}))
            if size.get('kind', 'constant') == 'constant' and 'bytes' in size:
                size['small'] = size['large'] = size.pop('bytes')
            apps.append(AppWorkload(
                app_id=AppId(int(entry['app_id'])), keys=int(entry['keys']),
                rate=float(entry['rate']),
                get_fraction=float(entry.get('get_fraction', 0.9)),
                size=SizeDistribution(**size),
                popularity=Popularity(**entry.get('popularity', {})),
                bursts=tuple(Burst(**b) for b in entry.get('bursts', ()))))
        spec = WorkloadSpec(float(document['duration']), tuple(apps),
                            int(document.get('seed', 0)))
    except (AttributeError, KeyError, TypeError, ValueError) as error:
        raise InvalidSpec(f'Encountered malformed workload spec: {error!r}') from error
    return validate_spec(spec)


def load_spec(path: Union[str, Path]) -> WorkloadSpec:
    """Read a JSON workload spec.

    Raises:
       InvalidSpec: on malformed JSON or an invalid spec.
       OSError: if the file cannot be read.

    """
    try:
        document: Any = json.loads(Path(path).read_text())
    except json.JSONDecodeError as error:
        raise InvalidSpec(f'{path}: {error}') from error
    if not isinstance(document, dict):
        raise InvalidSpec(f'{path}: expected a JSON object')
    return spec_from_mapping(document)


# Sampling
# ========


def zipf_cdf(keys: int, theta: float) -> np.ndarray:
    """Return the cumulative Zipf probabilities of ranks ``1..keys``."""
    weights: np.ndarray = 1.0 / np.power(np.arange(1, keys + 1, dtype=np.float64), theta)
    cdf: np.ndarray = np.cumsum(weights)
    return cdf / cdf[-1]


def sample_keys(rng: np.random.Generator, popularity: Popularity, keys: int,
                count: int) -> np.ndarray:
    """Draw ``count`` key indices; index 0 is the most popular key."""
    if popularity.kind == 'uniform' or keys == 1:
        return rng.integers(0, keys, size=count)
    indices: np.ndarray = np.searchsorted(zipf_cdf(keys, popularity.theta),
                                          rng.random(count), side='right')
    return np.minimum(indices, keys - 1)


def sample_sizes(rng: np.random.Generator, size: SizeDistribution, keys: int) -> np.ndarray:
    """Draw one fixed item size per key."""
    if size.kind == 'constant':
        return np.full(keys, size.small, dtype=np.int64)
    if size.kind == 'uniform':
        return rng.integers(size.small, size.large + 1, size=keys)
    return np.where(rng.random(keys) < size.large_fraction, size.large, size.small)


def arrival_times(rng: np.random.Generator, app: AppWorkload, duration: float) -> np.ndarray:
    """Return sorted arrival times in seconds of a piecewise-constant Poisson process."""
    cuts: set[float] = {0.0, duration}
    for burst in app.bursts:
        cuts.update(t for t in (burst.start, burst.start + burst.duration) if 0 < t < duration)
    bounds: list[float] = sorted(cuts)
    pieces: list[np.ndarray] = []
    for start, end in zip(bounds, bounds[1:]):
        rate: float = app.rate
        for burst in app.bursts:
            if burst.start <= start < burst.start + burst.duration:
                rate *= burst.multiplier
        count: int = int(rng.poisson(rate * (end - start)))
        pieces.append(np.sort(rng.uniform(start, end, size=count)))
    return np.concatenate(pieces) if pieces else np.empty(0)


def app_stream(app: AppWorkload, duration: float, seed: int) -> list[TraceRecord]:
    """Generate the requests of one application, in time order."""
    rng: np.random.Generator = np.random.default_rng((seed, int(app.app_id)))
    sizes: np.ndarray = sample_sizes(rng, app.size, app.keys)
    times: np.ndarray = arrival_times(rng, app, duration)
    keys: np.ndarray = sample_keys(rng, app.popularity, app.keys, len(times))
    gets: np.ndarray = rng.random(len(times)) < app.get_fraction
    records: list[TraceRecord] = []
    for when, index, is_get in zip(times, keys, gets):
        name: str = app.key_name(int(index))
        value_size: int = max(0, int(sizes[index]) - RECORD_HEADER - len(name))
        records.append(TraceRecord(int(when * 1_000_000), GET if is_get else SET,
                                   app.app_id, name, value_size))
    return records


def generate(spec: WorkloadSpec, seed: Optional[int] = None) -> Iterator[TraceRecord]:
    """Generate the merged request stream of ``spec``.

    Args:
       spec (:obj:`WorkloadSpec`)
       seed (:obj:`int`, optional): overrides ``spec.seed``.

    Return:
       The records of all applications ordered by timestamp; ties are broken by
       application id and then by generation order.

    Raises:
       InvalidSpec: if ``spec`` is invalid.

    """
    validate_spec(spec)
    chosen: int = spec.seed if seed is None else seed
    streams: list[list[TraceRecord]] = [app_stream(app, spec.duration, chosen)
                                        for app in sorted(spec.apps, key=lambda a: a.app_id)]
    logger.info(f'Generated {sum(map(len, streams))} requests for {len(streams)} apps '
                f'with seed {chosen}')
    return heapq.merge(*streams, key=lambda r: (r.timestamp, r.app_id))


# Bundled Corpus
# ==============

#: Item sizes of the bundled corpus: small 56 B objects and large 576 B objects.
SMALL_ITEM: Final = 56
LARGE_ITEM: Final = 576


def bundled_workload(duration: float = 300.0, scale: float = 1.0, seed: int = 2017) -> WorkloadSpec:
    """The bundled three-application corpus.

       - app 1 is stable and busy, with a working set a little over half the
         bundled memory and a high hit rate once it holds most of it;
       - app 2 is quieter, with a working set of about 0.4 MiB;
       - app 3 is bursty: a key space far wider than any cache, with a ten-fold
         request burst in the middle of the run, and a low hit rate whatever
         memory it is given.

    Keys are drawn uniformly, so the hit rate of an application grows linearly with
    its memory until its working set fits.

    Every application stores 56 B items and, with probability 5 %, 576 B items.

    Args:
       duration (:obj:`float`): length in seconds.
       scale (:obj:`float`): multiplies key-space sizes and request rates.
       seed (:obj:`int`)

    """
    sizes = SizeDistribution('two_point', SMALL_ITEM, LARGE_ITEM, 0.05)
    uniform = Popularity('uniform')

    def scaled(number: float) -> int:
        return max(1, round(number * scale))

    return validate_spec(WorkloadSpec(duration, (
        AppWorkload(AppId(1), scaled(8000), scaled(150), 0.95, sizes, uniform),
        AppWorkload(AppId(2), scaled(5000), scaled(40), 0.9, sizes, uniform),
        AppWorkload(AppId(3), scaled(100_000), scaled(40), 0.9, sizes, uniform,
                    (Burst(duration * 0.4, duration * 0.2, 10.0),))), seed))


def spec_to_mapping(spec: WorkloadSpec) -> dict[str, Any]:
    """Render a spec as the JSON document `spec_from_mapping` reads."""
    return {'duration': spec.duration, 'seed': spec.seed,
            'apps': [{'app_id': int(a.app_id), 'keys': a.keys, 'rate': a.rate,
                      'get_fraction': a.get_fraction,
                      'size': {'kind': a.size.kind, 'small': a.size.small,
                               'large': a.size.large, 'large_fraction': a.size.large_fraction},
                      'popularity': {'kind': a.popularity.kind, 'theta': a.popularity.theta},
                      'bursts': [{'start': b.start, 'duration': b.duration,
                                  'multiplier': b.multiplier} for b in a.bursts]}
                     for a in spec.apps]}


if __name__ == '__main__':
    logger.info('The bundled corpus, one minute long:')
    for record in list(generate(bundled_workload(60.0)))[:5]:
        logger.info(record.to_line())
