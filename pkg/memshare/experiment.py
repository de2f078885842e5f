#!/usr/bin/env python3.9
"""Deterministic trace replay through any engine, and the sweeps built on it.

Replays always run in simulator mode: the engine's clock follows the trace
timestamps, cleaning happens inline, and the same (configuration, trace, seed)
produces the same numbers on every run.

Fill-on-miss
============
A lookaside cache is filled by its clients: after a miss the client fetches the
value from its database and SETs it. With ``fill_on_miss`` the harness emulates
this by storing a value of the traced size after every GET miss.
"""
# Imports from standard library.
from dataclasses import dataclass, field, replace
import math
from typing import Iterable, NamedTuple, Optional, Sequence, Union
# Imports from third-party modules.
from loguru import logger
from tqdm import tqdm
# Imports from local modules.
from memshare.config import config_from_mapping, EngineConfig, KIB, MIB, with_overrides
from memshare.engine import Engine, Miss, StatsSnapshot, WindowSample, hit_rate
from memshare.segment import AppId
from memshare.slab import SlabEngine
from memshare.trace import DEL, GET, SET, TraceRecord

AnyEngine = Union[Engine, SlabEngine]


# Classes and Types
# =================


@dataclass
class ReplayOptions:
    """How a trace is replayed.

    ``auto_private_window`` (seconds) first runs the shared policy without private
    memory for that long, then derives privateMem from the observed targets and
    switches to the idle-tax policy.
    """

    fill_on_miss: bool = False
    metrics_window: Optional[float] = None
    baseline: Optional['ExperimentResult'] = None
    auto_private_window: Optional[float] = None
    label: str = ''
    progress: bool = False


@dataclass
class ExperimentResult:  # pylint: disable=too-many-instance-attributes
    """Everything measured during one replay."""

    label: str
    engine: str
    policy: str
    apps: list[AppId]
    windows: list[WindowSample]
    final: StatsSnapshot
    requests: int = 0
    fills: int = 0
    relocated_per_freed_segment: float = 0.0
    auto_private: dict[AppId, int] = field(default_factory=dict)
    baseline_label: Optional[str] = None

    @property
    def combined_hit_rate(self) -> float:
        """Hits over GETs across every application."""
        return self.final.combined_hit_rate

    @property
    def miss_reduction(self) -> Optional[float]:
        """Miss reduction against the baseline, if one was declared."""
        return self.final.miss_reduction

    def window_hit_rates(self, app: Optional[AppId] = None) -> list[float]:
        """Hit rate per window of one application, or combined if ``app`` is None."""
        rates: list[float] = []
        for sample in self.windows:
            apps: list[AppId] = self.apps if app is None else [app]
            rates.append(hit_rate(sum(sample.hits[a] for a in apps),
                                  sum(sample.gets[a] for a in apps)))
        return rates


class CleanBenchRow(NamedTuple):
    """One row of the cleaner benchmark."""

    segments_per_pass: int
    hit_rate: float
    relocated_per_freed_segment: float
    cleaner_bandwidth: float
    passes: int


# Engines
# =======


def make_engine(config: EngineConfig) -> AnyEngine:
    """Build the engine ``config.engine`` names."""
    if config.engine == 'memshare':
        return Engine.from_config(config)
    return SlabEngine.from_config(config)


def _replay_config(config: EngineConfig, options: ReplayOptions) -> EngineConfig:
    changes: dict = {'mode': 'simulator'}
    if options.metrics_window is not None:
        changes['metrics_window'] = options.metrics_window
    if options.auto_private_window is not None and config.engine == 'memshare':
        changes['policy'] = 'shared'
        changes['history_window'] = max(config.history_window, options.auto_private_window)
        changes['apps'] = {app: replace(c, private_mem_bytes=0)
                           for app, c in config.apps.items()}
    return with_overrides(config, **changes)


# Bundled configuration
# =====================


def bundled_config(**settings: object) -> EngineConfig:
    """Configuration for the bundled three-application corpus.

    Memory is small enough that the corpus saturates it: 1 MiB of 16 KiB segments,
    16 segments per pass. Each shadow queue remembers 64 KiB of evicted items, a
    small slice of the cache, so shadow hits measure what a few more credits would
    buy. Keyword arguments override flat configuration keys.
    """
    mapping: dict[str, object] = {
        'total_memory_bytes': MIB, 'segment_size_bytes': 16 * KIB,
        'segments_per_pass': 16, 'metrics_window': 10.0,
        'app.1.credit_size_bytes': 4 * KIB, 'app.2.credit_size_bytes': 4 * KIB,
        'app.3.credit_size_bytes': 4 * KIB,
        'app.1.shadow_queue_bytes': 64 * KIB, 'app.2.shadow_queue_bytes': 64 * KIB,
        'app.3.shadow_queue_bytes': 64 * KIB}
    mapping.update(settings)
    return config_from_mapping(mapping)


# Replay
# ======


def replay(engine: AnyEngine, trace: Iterable[TraceRecord], fill_on_miss: bool = False,
           progress: bool = False,
           auto_private: Optional[tuple[int, dict[AppId, int]]] = None) -> tuple[int, int, int]:
    """Feed every record of ``trace`` to ``engine``.

    Args:
       engine (:obj:`Engine` or :obj:`SlabEngine`)
       trace (:obj:`Iterable[TraceRecord]`)
       fill_on_miss (:obj:`bool`): SET the traced size after every GET miss.
       progress (:obj:`bool`): show a tqdm progress bar.
       auto_private (:obj:`tuple`, optional): ``(window, out)``; once ``window``
          clock units of trace have been replayed, switch the engine to automatic
          private memory and store the chosen privateMem in ``out``.

    Return:
       ``(requests, fills, last timestamp)``.

    """
    requests: int = 0
    fills: int = 0
    now: int = 0
    start: Optional[int] = None
    for record in tqdm(trace, desc='replay', leave=False, disable=not progress):
        now = record.timestamp
        if start is None:
            start = now
        engine.tick(now)
        if (auto_private is not None and not auto_private[1] and isinstance(engine, Engine)
                and now - start >= auto_private[0]):
            auto_private[1].update(engine.run_auto_private(auto_private[0], now))
        key: bytes = record.key.encode()
        if record.op == GET:
            if isinstance(engine.get(record.app_id, key, now), Miss) and fill_on_miss:
                engine.set(record.app_id, key, bytes(record.size), now)
                fills += 1
        elif record.op == SET:
            engine.set(record.app_id, key, bytes(record.size), now)
        elif record.op == DEL:
            engine.delete(record.app_id, key, now)
        requests += 1
    engine.finish(now)
    return requests, fills, now


def run_experiment(config: EngineConfig, trace: Iterable[TraceRecord],
                   options: Optional[ReplayOptions] = None) -> ExperimentResult:
    """Replay ``trace`` through the engine ``config`` selects and collect the results.

    Raises:
       ConfigError: if ``config`` is invalid.
       UnknownApp, OversizeObject: propagated from the engine.

    """
    options = options or ReplayOptions()
    effective: EngineConfig = _replay_config(config, options)
    engine: AnyEngine = make_engine(effective)
    chosen: dict[AppId, int] = {}
    auto: Optional[tuple[int, dict[AppId, int]]] = None
    if options.auto_private_window is not None:
        auto = (int(options.auto_private_window * 1_000_000), chosen)
    requests, fills, _ = replay(engine, trace, options.fill_on_miss, options.progress, auto)

    baseline: Optional[ExperimentResult] = options.baseline
    final: StatsSnapshot = engine.stats(baseline.final if baseline is not None else None)
    label: str = options.label or f'{effective.engine}-{effective.policy}'
    result = ExperimentResult(
        label, effective.engine, engine.arbiter.policy if isinstance(engine, Engine)
        else effective.policy, sorted(effective.apps), engine.metrics.samples, final,
        requests, fills,
        engine.cleaner.relocated_per_freed_segment() if isinstance(engine, Engine) else 0.0,
        chosen, baseline.label if baseline is not None else None)
    logger.success(f'{label}: {requests} requests, combined hit rate '
                   f'{result.combined_hit_rate:.4f}')
    return result


# Sweeps
# ======


def sweep_private_fraction(config: EngineConfig, trace: Sequence[TraceRecord],
                           fractions: Sequence[float],
                           options: Optional[ReplayOptions] = None) -> list[ExperimentResult]:
    """Replay ``trace`` once per fraction of memory reserved as private, split equally."""
    options = options or ReplayOptions()
    results: list[ExperimentResult] = []
    for fraction in tqdm(fractions, desc='private fraction', leave=False,
                         disable=not options.progress):
        share: int = math.floor(config.total_memory_bytes * fraction / len(config.apps))
        apps = {app: replace(c, private_mem_bytes=share) for app, c in config.apps.items()}
        results.append(run_experiment(with_overrides(config, apps=apps), trace,
                                      replace(options, label=f'private={fraction:.0%}')))
    return results


def sweep_credit_sizes(config: EngineConfig, trace: Sequence[TraceRecord],
                       assignments: Sequence[dict[AppId, int]],
                       options: Optional[ReplayOptions] = None) -> list[ExperimentResult]:
    """Replay ``trace`` once per assignment of credit sizes to applications."""
    options = options or ReplayOptions()
    results: list[ExperimentResult] = []
    for assignment in assignments:
        apps = {app: replace(c, credit_size_bytes=assignment.get(app, c.credit_size_bytes))
                for app, c in config.apps.items()}
        label: str = 'credits=' + '/'.join(f'{a}:{apps[a].credit_size_bytes}'
                                           for a in sorted(apps))
        results.append(run_experiment(with_overrides(config, apps=apps), trace,
                                      replace(options, label=label)))
    return results


def bench_clean(config: EngineConfig, trace: Sequence[TraceRecord], n_list: Sequence[int],
                options: Optional[ReplayOptions] = None) -> list[CleanBenchRow]:
    """Measure hit rate and cleaning cost for every segments-per-pass value in ``n_list``.

    The cleaner bandwidth is averaged over the whole trace.
    """
    options = options or ReplayOptions()
    rows: list[CleanBenchRow] = []
    for n in n_list:
        effective: EngineConfig = _replay_config(
            with_overrides(config, engine='memshare', segments_per_pass=n), options)
        engine = Engine.from_config(effective)
        _, _, end = replay(engine, trace, options.fill_on_miss, options.progress)
        start: int = trace[0].timestamp if trace else 0
        seconds: float = max(end - start, 1) / 1_000_000
        rows.append(CleanBenchRow(n, engine.stats().combined_hit_rate,
                                  engine.cleaner.relocated_per_freed_segment(),
                                  2 * engine.cleaner.relocated_bytes / seconds,
                                  engine.cleaner.passes))
        logger.info(f'n={n}: {rows[-1]}')
    return rows
