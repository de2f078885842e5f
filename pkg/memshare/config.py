#!/usr/bin/env python3.9
"""Engine configuration and the flat ``key = value`` configuration file format.

Configuration File Format
=========================
One setting per line, ``#`` starts a comment, blank lines are ignored::

   engine = memshare
   total_memory_bytes = 64M
   policy = shared
   app.1.private_mem_bytes = 8M
   app.1.rank_policy = slru:2
   app.2.credit_size_bytes = 192K

Global keys map one-to-one to the fields of `EngineConfig`. Keys of the form
``app.<id>.<field>`` map to the fields of the `AppConfig` of application ``<id>``.
Byte sizes accept a ``K``, ``M`` or ``G`` binary suffix.
"""
# Imports from standard library.
from dataclasses import dataclass, field, fields, replace
import math
import re
from pathlib import Path
from typing import Any, Final, Mapping, Optional, Union
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.errors import ConfigError
from memshare.rank import parse_rank_spec
from memshare.segment import AppId, app_id


# Constants
# =========

KIB: Final = 1024
MIB: Final = 1024 * KIB
GIB: Final = 1024 * MIB

ENGINES: Final = ('memshare', 'slab_partitioned', 'slab_greedy')
POLICIES: Final = ('partitioned', 'shared', 'idle_tax')
MODES: Final = ('simulator', 'server')

_SIZE_PATTERN: Final = re.compile(r'^\s*(\d+)\s*([KMG]?)i?B?\s*$', re.IGNORECASE)
_SUFFIXES: Final = {'': 1, 'K': KIB, 'M': MIB, 'G': GIB}
_TRUE_WORDS: Final = frozenset({'1', 'true', 'yes', 'on'})
_FALSE_WORDS: Final = frozenset({'0', 'false', 'no', 'off'})


# Classes and Types
# =================


@dataclass
class AppConfig:
    """Per-application settings.

    ``private_mem_bytes = None`` means "use the policy default": an equal split of
    the memory not claimed by other applications under the partitioned and idle-tax
    policies, and zero under the shared policy.
    """

    app_id: AppId
    private_mem_bytes: Optional[int] = None
    credit_size_bytes: int = 64 * KIB
    rank_policy: str = 'lru'
    shadow_queue_bytes: int = 10 * MIB
    token: Optional[str] = None


@dataclass
class EngineConfig:  # pylint: disable=too-many-instance-attributes
    """Every setting of an engine, a harness run or a server."""

    engine: str = 'memshare'
    mode: str = 'simulator'
    total_memory_bytes: int = 64 * MIB
    segment_size_bytes: int = MIB
    free_pool_target_fraction: float = 0.01
    hash_buckets: int = 1024
    policy: str = 'shared'
    tax_rate: float = 0.5
    idle_time: float = 5 * 3600.0
    rng_seed: int = 0
    segments_per_pass: int = 100
    need_fraction: float = 0.5
    tail_drop_threshold: float = 0.5
    max_parallel_passes: int = 1
    adaptive_pass_size: bool = False
    tick_interval: float = 1.0
    history_window: float = 3600.0
    metrics_window: float = 60.0
    host: str = '127.0.0.1'
    port: int = 11211
    listener_tenant: Optional[int] = None
    apps: dict[AppId, AppConfig] = field(default_factory=dict)

    @property
    def segment_count(self) -> int:
        """Number of segments the log is carved into."""
        return self.total_memory_bytes // self.segment_size_bytes

    @property
    def idle_time_us(self) -> int:
        """Idle time in clock units (microseconds)."""
        return int(self.idle_time * 1_000_000)

    @property
    def tick_interval_us(self) -> int:
        """Policy recomputation cadence in clock units (microseconds)."""
        return int(self.tick_interval * 1_000_000)

    @property
    def history_window_us(self) -> int:
        """Span of targetMem history kept for automatic private memory, in clock units."""
        return int(self.history_window * 1_000_000)

    @property
    def metrics_window_us(self) -> int:
        """Metrics window length in clock units (microseconds)."""
        return int(self.metrics_window * 1_000_000)

    def private_mem(self, app: AppId) -> int:
        """Return the resolved privateMem of an application.

        Explicit values win. The remaining memory is split equally among apps
        without an explicit value, except under the shared policy where the
        default is zero.
        """
        explicit: Optional[int] = self.apps[app].private_mem_bytes
        if explicit is not None:
            return explicit
        if self.policy == 'shared':
            return 0
        unassigned: list[AppId]
        unassigned = [a for a, c in self.apps.items() if c.private_mem_bytes is None]
        claimed: int = sum(c.private_mem_bytes or 0 for c in self.apps.values())
        return max(0, self.total_memory_bytes - claimed) // len(unassigned)

    def validate(self) -> 'EngineConfig':
        """Check every documented range. Return ``self`` so calls can be chained.

        Raises:
           ConfigError: on the first violated constraint.

        """
        _check(self.engine in ENGINES, f'engine must be one of {ENGINES}, got {self.engine!r}')
        _check(self.mode in MODES, f'mode must be one of {MODES}, got {self.mode!r}')
        _check(self.policy in POLICIES,
               f'policy must be one of {POLICIES}, got {self.policy!r}')
        _check(self.segment_size_bytes > 0, 'segment_size_bytes must be positive')
        _check(self.segment_count >= 2,
               f'total_memory_bytes {self.total_memory_bytes} holds fewer than two '
               f'segments of {self.segment_size_bytes} bytes')
        _check(0.0 <= self.free_pool_target_fraction < 1.0,
               'free_pool_target_fraction must lie in [0, 1)')
        _check(self.hash_buckets > 0, 'hash_buckets must be positive')
        _check(0.0 <= self.tax_rate <= 1.0, f'tax_rate {self.tax_rate} not in [0, 1]')
        _check(self.idle_time > 0, 'idle_time must be positive')
        _check(self.segments_per_pass >= 1, 'segments_per_pass must be at least 1')
        _check(0.0 <= self.need_fraction <= 1.0, 'need_fraction must lie in [0, 1]')
        _check(0.0 <= self.tail_drop_threshold <= 1.0,
               'tail_drop_threshold must lie in [0, 1]')
        _check(self.max_parallel_passes >= 1, 'max_parallel_passes must be at least 1')
        _check(self.tick_interval > 0, 'tick_interval must be positive')
        _check(self.history_window >= self.tick_interval,
               'history_window must cover at least one tick_interval')
        _check(self.metrics_window > 0, 'metrics_window must be positive')
        _check(bool(self.apps), 'at least one application must be configured')
        for app_config in self.apps.values():
            _check(app_config.credit_size_bytes > 0,
                   f'app {app_config.app_id}: credit_size_bytes must be positive')
            _check(app_config.shadow_queue_bytes >= 0,
                   f'app {app_config.app_id}: shadow_queue_bytes must be non-negative')
            _check((app_config.private_mem_bytes or 0) >= 0,
                   f'app {app_config.app_id}: private_mem_bytes must be non-negative')
            try:
                parse_rank_spec(app_config.rank_policy)
            except ValueError as error:
                raise ConfigError(f'app {app_config.app_id}: {error}') from error
        private_total: int = sum(map(self.private_mem, self.apps))
        _check(private_total <= self.total_memory_bytes,
               f'sum of private memory {private_total} exceeds total memory '
               f'{self.total_memory_bytes}')
        if self.listener_tenant is not None:
            _check(AppId(self.listener_tenant) in self.apps,
                   f'listener_tenant {self.listener_tenant} is not a configured app')
        return self


# Parsing Functions
# =================


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def parse_size(text: Union[str, int]) -> int:
    """Parse a byte size such as ``65536``, ``64K``, ``10M`` or ``1GiB``.

    Raises:
       ConfigError: if ``text`` is not a size.

    """
    if isinstance(text, int):
        return text
    match = _SIZE_PATTERN.match(text)
    if match is None:
        raise ConfigError(f'Encountered malformed byte size {text!r}')
    number, suffix = match.groups()
    return int(number) * _SUFFIXES[suffix.upper()]


def parse_bool(text: Union[str, bool]) -> bool:
    """Parse ``true/false/yes/no/on/off/1/0``."""
    if isinstance(text, bool):
        return text
    lowered: str = text.strip().lower()
    if lowered in _TRUE_WORDS:
        return True
    if lowered in _FALSE_WORDS:
        return False
    raise ConfigError(f'Encountered malformed boolean {text!r}')


def _coerce(name: str, kind: Any, raw: Any) -> Any:
    """Convert a raw value to the type of the dataclass field it is assigned to."""
    try:
        if name.endswith('_bytes'):
            return None if raw is None else parse_size(raw)
        if kind in (bool, 'bool'):
            return parse_bool(raw)
        if kind in (int, 'int') or name in {'port', 'rng_seed', 'hash_buckets',
                                           'segments_per_pass', 'max_parallel_passes'}:
            return int(raw)
        if kind in (float, 'float'):
            value: float = float(raw)
            if math.isnan(value):
                raise ConfigError(f'{name} must not be NaN')
            return value
        if name == 'listener_tenant':
            return None if raw in (None, '') else int(raw)
        return str(raw).strip() if raw is not None else None
    except (TypeError, ValueError) as error:
        if isinstance(error, ConfigError):
            raise
        raise ConfigError(f'Encountered bad value {raw!r} for {name}') from error


def config_from_mapping(mapping: Mapping[str, Any]) -> EngineConfig:
    """Build and validate an `EngineConfig` from flat keys.

    Args:
       mapping (:obj:`Mapping[str, Any]`): global keys and ``app.<id>.<field>`` keys.
          Values may be strings (as read from a file) or already-typed values.

    Return:
       A validated `EngineConfig`.

    Raises:
       ConfigError: on unknown keys, malformed values or violated ranges.

    """
    global_fields: dict[str, Any] = {f.name: f.type for f in fields(EngineConfig)
                                     if f.name != 'apps'}
    app_fields: dict[str, Any] = {f.name: f.type for f in fields(AppConfig)
                                  if f.name != 'app_id'}

    settings: dict[str, Any] = {}
    app_settings: dict[AppId, dict[str, Any]] = {}
    for key, raw in mapping.items():
        parts: list[str] = key.strip().split('.')
        if parts[0] == 'app' and len(parts) == 3:
            try:
                app: AppId = app_id(int(parts[1]))
            except ValueError as error:
                raise ConfigError(f'Encountered bad application id in {key!r}') from error
            if parts[2] not in app_fields:
                raise ConfigError(f'Encountered unknown application key {key!r}')
            app_settings.setdefault(app, {})[parts[2]] = _coerce(parts[2],
                                                                 app_fields[parts[2]], raw)
        elif len(parts) == 1 and parts[0] in global_fields:
            settings[parts[0]] = _coerce(parts[0], global_fields[parts[0]], raw)
        else:
            raise ConfigError(f'Encountered unknown configuration key {key!r}')

    apps: dict[AppId, AppConfig]
    apps = {app: AppConfig(app_id=app, **values)
            for app, values in sorted(app_settings.items())}
    return EngineConfig(apps=apps, **settings).validate()


def load_config(path: Union[str, Path]) -> EngineConfig:
    """Read a flat ``key = value`` configuration file.

    Raises:
       ConfigError: on malformed lines and everything `config_from_mapping` rejects.
       OSError: if the file cannot be read.

    """
    mapping: dict[str, str] = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        content: str = line.split('#', 1)[0].strip()
        if not content:
            continue
        if '=' not in content:
            raise ConfigError(f'{path}:{number}: expected key = value, got {line!r}')
        key, value = (part.strip() for part in content.split('=', 1))
        mapping[key] = value
    config: EngineConfig = config_from_mapping(mapping)
    logger.info(f'Loaded configuration from {path}: engine={config.engine} '
                f'policy={config.policy} apps={sorted(config.apps)}')
    return config


def with_overrides(config: EngineConfig, **changes: Any) -> EngineConfig:
    """Return a validated copy of ``config`` with some fields replaced."""
    return replace(config, **changes).validate()


def with_app_overrides(config: EngineConfig, app: AppId, **changes: Any) -> EngineConfig:
    """Return a validated copy of ``config`` with one application's fields replaced."""
    apps: dict[AppId, AppConfig] = dict(config.apps)
    apps[app] = replace(apps[app], **changes)
    return replace(config, apps=apps).validate()


if __name__ == '__main__':
    logger.info('Configurations can be built from flat keys.')
    logger.info(">>> config_from_mapping({'policy': 'idle_tax', 'app.1.rank_policy': 'lfu'})")
    logger.info(config_from_mapping({'policy': 'idle_tax', 'app.1.rank_policy': 'lfu'}))
