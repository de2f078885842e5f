#!/usr/bin/env python3.9
"""The memcached ASCII protocol subset, without any I/O.

Supported Commands
==================
::

   get <key>*
   set <key> <flags> <exptime> <bytes> [noreply]\\r\\n<data>\\r\\n
   delete <key> [noreply]
   stats
   tenant <app id> [<token>]
   quit

Every data-path command runs on behalf of the session's tenant, chosen with
``tenant`` or fixed per listener. ``exptime`` is parsed and ignored. ``flags`` are
kept as a 4-byte big-endian prefix of the stored value and echoed by ``get``.

`ProtocolHandler.feed` consumes raw bytes of one connection and returns the
response bytes, so the server only moves bytes and tests compare transcripts.
A ``set`` whose value cannot fit a segment is refused as soon as its command line
arrives; its data block is then discarded as it streams in, never buffered.
"""
# Imports from standard library.
import itertools
import os
import struct
from dataclasses import dataclass, field
from typing import Final, Iterator, NamedTuple, Optional
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.engine import Engine, Miss, StatsSnapshot
from memshare.errors import ClientError, OutOfMemory, OversizeObject, ProtocolError, UnknownApp
from memshare.segment import AppId, RECORD_HEADER

MAX_KEY_LENGTH: Final = 250
MAX_LINE_LENGTH: Final = 2048
VERBS: Final = ('get', 'set', 'delete', 'stats', 'quit', 'tenant')

_FLAGS: Final = struct.Struct('>I')

STORED: Final = b'STORED\r\n'
END: Final = b'END\r\n'
DELETED: Final = b'DELETED\r\n'
NOT_FOUND: Final = b'NOT_FOUND\r\n'
OK: Final = b'OK\r\n'
ERROR: Final = b'ERROR\r\n'
UNKNOWN_TENANT: Final = b'SERVER_ERROR unknown tenant\r\n'
TOO_LARGE: Final = b'SERVER_ERROR object too large for cache\r\n'


# Classes and Types
# =================


class Command(NamedTuple):
    """A parsed request line, with its data block for ``set``."""

    verb: str
    keys: tuple[bytes, ...] = ()
    flags: int = 0
    exptime: int = 0
    length: int = 0
    noreply: bool = False
    data: Optional[bytes] = None
    tenant: Optional[int] = None
    token: Optional[str] = None

    @property
    def key(self) -> bytes:
        """The first key."""
        return self.keys[0]


_session_ids: Iterator[int] = itertools.count(1)


@dataclass
class Session:  # pylint: disable=too-many-instance-attributes
    """State of one client connection."""

    tenant: Optional[AppId] = None
    connection_id: int = field(default_factory=lambda: next(_session_ids))
    epoch: Optional[int] = None
    buffer: bytearray = field(default_factory=bytearray)
    pending: Optional[Command] = None
    swallow: bool = False
    #: Bytes of a rejected data block still to be discarded.
    skip: int = 0
    closed: bool = False


# Parsing
# =======


def _check_key(key: bytes) -> bytes:
    if len(key) > MAX_KEY_LENGTH or any(byte <= 32 or byte == 127 for byte in key):
        raise ClientError('bad command line format')
    return key


def _number(text: bytes, limit: int = 2**64) -> int:
    if not text.isdigit() or int(text) >= limit:
        raise ClientError('bad command line format')
    return int(text)


def parse_command(line: bytes, data_block: Optional[bytes] = None) -> Command:
    """Parse one request line and, for ``set``, its data block.

    Args:
       line (:obj:`bytes`): the line including its ``\\r\\n`` terminator.
       data_block (:obj:`bytes`, optional): the bytes following a ``set`` line,
          which must be exactly ``<bytes>`` bytes plus ``\\r\\n``. Without it, a
          ``set`` command is returned with ``data=None``.

    Raises:
       ProtocolError: on an unknown or missing verb or an unterminated line.
       ClientError: on malformed arguments or a bad data block.

    """
    if line.endswith(b'\r\n'):
        content: bytes = line[:-2]
    elif line.endswith(b'\n'):
        content = line[:-1]
    else:
        raise ProtocolError('unterminated command line')
    parts: list[bytes] = content.split()
    if not parts:
        raise ProtocolError('empty command line')
    verb: str = parts[0].decode('ascii', 'replace').lower()
    arguments: list[bytes] = parts[1:]

    if verb == 'get':
        if not arguments:
            raise ProtocolError('get without keys')
        return Command('get', tuple(map(_check_key, arguments)))
    if verb == 'set':
        noreply: bool = len(arguments) == 5 and arguments[4] == b'noreply'
        if len(arguments) != 4 and not noreply:
            raise ClientError('bad command line format')
        key: bytes = _check_key(arguments[0])
        flags: int = _number(arguments[1], 2**32)
        exptime: int = _number(arguments[2].lstrip(b'-'))
        length: int = _number(arguments[3], 2**31)
        data: Optional[bytes] = None
        if data_block is not None:
            if len(data_block) != length + 2 or not data_block.endswith(b'\r\n'):
                raise ClientError('bad data chunk')
            data = data_block[:-2]
        return Command('set', (key,), flags, exptime, length, noreply, data)
    if verb == 'delete':
        if len(arguments) not in (1, 2) or (len(arguments) == 2 and arguments[1] != b'noreply'):
            raise ClientError('bad command line format')
        return Command('delete', (_check_key(arguments[0]),), noreply=len(arguments) == 2)
    if verb in ('stats', 'quit'):
        return Command(verb)
    if verb == 'tenant':
        if len(arguments) not in (1, 2):
            raise ClientError('bad command line format')
        token: Optional[str] = arguments[1].decode('utf-8', 'replace') if len(arguments) == 2 else None
        return Command('tenant', tenant=_number(arguments[0]), token=token)
    raise ProtocolError(f'unknown command {verb!r}')


# Execution
# =========


def encode_value(flags: int, data: bytes) -> bytes:
    """Prefix ``data`` with its client flags for storage."""
    return _FLAGS.pack(flags) + data


def decode_value(stored: bytes) -> tuple[int, bytes]:
    """Split a stored value into client flags and data."""
    if len(stored) < _FLAGS.size:
        return 0, stored
    return _FLAGS.unpack_from(stored)[0], stored[_FLAGS.size:]


def stats_lines(snapshot: StatsSnapshot, tenant: AppId) -> list[tuple[str, str]]:
    """Return the ``STAT`` name/value pairs reported to a tenant."""
    app = snapshot.apps[tenant]
    return [('pid', str(os.getpid())),
            ('uptime', str(snapshot.time // 1_000_000)),
            ('cmd_get', str(app.gets)),
            ('get_hits', str(app.hits)),
            ('get_misses', str(app.misses)),
            ('hit_rate', f'{app.hit_rate:.4f}'),
            ('memshare_app_id', str(tenant)),
            ('memshare_actual_mem', str(app.actual_mem)),
            ('memshare_target_mem', str(app.target_mem)),
            ('memshare_private_mem', str(app.private_mem)),
            ('memshare_shared_mem', str(app.shared_mem)),
            ('memshare_shadow_hits', str(app.shadow_hits)),
            ('memshare_shadow_entries', str(app.shadow_entries)),
            ('memshare_shadow_overhead_bytes', str(app.shadow_overhead_bytes)),
            ('memshare_evicted_items', str(app.evicted_items)),
            ('memshare_expected_share', f'{app.expected_share:.4f}'),
            ('memshare_combined_hit_rate', f'{snapshot.combined_hit_rate:.4f}'),
            ('memshare_cleaner_bandwidth', f'{snapshot.cleaner_bandwidth:.4f}'),
            ('memshare_utilization', f'{snapshot.utilization:.4f}'),
            ('memshare_free_segments', str(snapshot.free_segments))]


class ProtocolHandler:
    """Executes commands of many sessions against one `Engine`.

    Args:
       engine (:obj:`Engine`)
       listener_tenant (:obj:`AppId`, optional): tenant of sessions that never send
          a ``tenant`` command.

    """

    def __init__(self, engine: Engine, listener_tenant: Optional[AppId] = None):
        self.engine = engine
        self.listener_tenant = listener_tenant

    def new_session(self) -> Session:
        """Open a session for a new connection."""
        session = Session(self.listener_tenant)
        logger.debug(f'session {session.connection_id} opened, tenant={session.tenant}')
        return session

    def feed(self, session: Session, data: bytes) -> bytes:
        """Consume bytes received on ``session`` and return the bytes to send back."""
        session.buffer += data
        out = bytearray()
        while not session.closed:
            buffer: bytearray = session.buffer
            if session.skip:
                dropped: int = min(session.skip, len(buffer))
                del buffer[:dropped]
                session.skip -= dropped
                if session.skip:
                    break
                continue
            if session.pending is not None:
                needed: int = session.pending.length + 2
                if len(buffer) < needed:
                    break
                block: bytes = bytes(buffer[:needed])
                del buffer[:needed]
                pending: Command = session.pending
                session.pending = None
                if not block.endswith(b'\r\n'):
                    out += b'CLIENT_ERROR bad data chunk\r\n'
                    session.swallow = True
                    continue
                out += self.execute(session, pending._replace(data=block[:-2]))
                continue
            newline: int = buffer.find(b'\n')
            if session.swallow:
                if newline < 0:
                    buffer.clear()
                    break
                del buffer[:newline + 1]
                session.swallow = False
                continue
            if newline < 0:
                if len(buffer) > MAX_LINE_LENGTH:
                    buffer.clear()
                    out += b'CLIENT_ERROR line too long\r\n'
                break
            line: bytes = bytes(buffer[:newline + 1])
            del buffer[:newline + 1]
            try:
                command: Command = parse_command(line)
            except ClientError as error:
                out += f'CLIENT_ERROR {error}\r\n'.encode()
                continue
            except ProtocolError:
                out += ERROR
                continue
            if command.verb == 'set':
                if self._record_size(command) > self.engine.store.max_record_size:
                    out += TOO_LARGE
                    session.skip = command.length + 2
                    continue
                session.pending = command
                continue
            out += self.execute(session, command)
        return bytes(out)

    @staticmethod
    def _record_size(command: Command) -> int:
        """Bytes the log needs for the value of a ``set``, flags prefix included."""
        return RECORD_HEADER + len(command.key) + _FLAGS.size + command.length

    def execute(self, session: Session, command: Command) -> bytes:
        """Run one complete command for ``session`` and return its response."""
        if command.verb == 'quit':
            session.closed = True
            return b''
        if command.verb == 'tenant':
            return self._tenant(session, command)
        if session.tenant is None:
            return UNKNOWN_TENANT
        tenant: AppId = session.tenant
        try:
            if command.verb != 'get':
                # A SET may wait for free segments and must not pin their epoch.
                return self._data_command(tenant, command)
            with self.engine.store.epochs.guard() as epoch:
                session.epoch = epoch
                try:
                    return self._data_command(tenant, command)
                finally:
                    session.epoch = None
        except UnknownApp:
            return UNKNOWN_TENANT

    def _tenant(self, session: Session, command: Command) -> bytes:
        assert command.tenant is not None
        app = AppId(command.tenant)
        app_config = self.engine.config.apps.get(app)
        if app_config is None:
            return UNKNOWN_TENANT
        if app_config.token is not None and command.token != app_config.token:
            return b'CLIENT_ERROR bad tenant token\r\n'
        session.tenant = app
        logger.debug(f'session {session.connection_id} is tenant {app}')
        return OK

    def _data_command(self, tenant: AppId, command: Command) -> bytes:
        if command.verb == 'get':
            out = bytearray()
            for key in command.keys:
                result = self.engine.get(tenant, key)
                if not isinstance(result, Miss):
                    flags, data = decode_value(result)
                    out += b'VALUE %s %d %d\r\n%s\r\n' % (key, flags, len(data), data)
            return bytes(out + END)
        if command.verb == 'set':
            assert command.data is not None
            try:
                self.engine.set(tenant, command.key, encode_value(command.flags, command.data))
            except OversizeObject:
                return TOO_LARGE
            except OutOfMemory:
                return b'SERVER_ERROR out of memory storing object\r\n'
            return b'' if command.noreply else STORED
        if command.verb == 'delete':
            found: bool = self.engine.delete(tenant, command.key)
            if command.noreply:
                return b''
            return DELETED if found else NOT_FOUND
        lines: list[tuple[str, str]] = stats_lines(self.engine.stats(), tenant)
        return b''.join(f'STAT {name} {value}\r\n'.encode() for name, value in lines) + END
