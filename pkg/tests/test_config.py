#! /usr/bin/env python3.9

import pytest
from memshare.config import (AppConfig, config_from_mapping, EngineConfig, KIB, load_config,
                             MIB, parse_bool, parse_size, with_app_overrides, with_overrides)
from memshare.errors import ConfigError, MemshareError
from memshare.segment import AppId


def two_apps(**settings):
    mapping = {'app.1.credit_size_bytes': '4K', 'app.2.credit_size_bytes': '4K'}
    mapping.update(settings)
    return config_from_mapping(mapping)


def test_parse_size():
    assert parse_size('65536') == 65536
    assert parse_size('64K') == 64 * KIB
    assert parse_size('10M') == 10 * MIB
    assert parse_size('1GiB') == 1024 * MIB
    assert parse_size(' 2 k ') == 2 * KIB
    assert parse_size(12) == 12
    with pytest.raises(ConfigError):
        parse_size('ten')
    with pytest.raises(ConfigError):
        parse_size('-1K')


def test_parse_bool():
    assert parse_bool('yes')
    assert parse_bool('ON')
    assert not parse_bool('0')
    assert not parse_bool(False)
    with pytest.raises(ConfigError):
        parse_bool('maybe')


def test_config_from_mapping():
    config = two_apps(policy='idle_tax', tax_rate='0.25', **{'app.1.rank_policy': 'slru:3'})
    assert config.policy == 'idle_tax'
    assert config.tax_rate == 0.25
    assert sorted(config.apps) == [1, 2]
    assert config.apps[AppId(1)].rank_policy == 'slru:3'
    assert config.apps[AppId(2)].credit_size_bytes == 4 * KIB
    assert config.segment_count == 64


def test_config_from_mapping_rejects():
    with pytest.raises(ConfigError):
        two_apps(policy='fair')
    with pytest.raises(ConfigError):
        two_apps(colour='blue')
    with pytest.raises(ConfigError):
        two_apps(**{'app.x.credit_size_bytes': '1K'})
    with pytest.raises(ConfigError):
        two_apps(**{'app.1.rank_policy': 'mru'})
    with pytest.raises(ConfigError):
        two_apps(tax_rate='1.5')
    with pytest.raises(ConfigError):
        two_apps(total_memory_bytes='1M', segment_size_bytes='1M')
    with pytest.raises(ConfigError):
        two_apps(tick_interval='10', history_window='5')
    with pytest.raises(ConfigError):
        config_from_mapping({})
    with pytest.raises(ConfigError):
        two_apps(listener_tenant='7')


def test_errors_are_builtin_errors_too():
    with pytest.raises(ValueError):
        two_apps(policy='fair')
    with pytest.raises(MemshareError):
        two_apps(policy='fair')


def test_private_mem_defaults():
    config = two_apps(policy='partitioned')
    assert config.private_mem(AppId(1)) == 32 * MIB
    assert config.private_mem(AppId(2)) == 32 * MIB

    config = two_apps(policy='partitioned', **{'app.1.private_mem_bytes': '48M'})
    assert config.private_mem(AppId(1)) == 48 * MIB
    assert config.private_mem(AppId(2)) == 16 * MIB

    assert two_apps(policy='shared').private_mem(AppId(1)) == 0

    with pytest.raises(ConfigError):
        two_apps(**{'app.1.private_mem_bytes': '40M', 'app.2.private_mem_bytes': '40M'})


def test_load_config(tmp_path):
    path = tmp_path / 'memshare.conf'
    path.write_text('# a comment\n'
                    'engine = slab_greedy\n'
                    '\n'
                    'total_memory_bytes = 8M  # trailing\n'
                    'segment_size_bytes = 64K\n'
                    'app.3.shadow_queue_bytes = 1M\n')
    config = load_config(path)
    assert config.engine == 'slab_greedy'
    assert config.segment_count == 128
    assert config.apps[AppId(3)].shadow_queue_bytes == MIB

    path.write_text('engine memshare\n')
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(OSError):
        load_config(tmp_path / 'missing.conf')


def test_with_overrides():
    config = two_apps()
    assert with_overrides(config, policy='partitioned').policy == 'partitioned'
    assert config.policy == 'shared'
    assert with_app_overrides(config, AppId(1), token='s3cret').apps[AppId(1)].token == 's3cret'
    assert config.apps[AppId(1)].token is None
    with pytest.raises(ConfigError):
        with_overrides(config, segments_per_pass=0)


def test_time_units():
    config = EngineConfig(apps={AppId(1): AppConfig(AppId(1))}, idle_time=2.5,
                          metrics_window=0.5)
    assert config.idle_time_us == 2_500_000
    assert config.metrics_window_us == 500_000
    assert config.tick_interval_us == 1_000_000
