#!/usr/bin/env python3.9
"""A TCP front end speaking the memcached ASCII protocol subset.

Each connection gets one `Session`. Received bytes are handed to the shared
`ProtocolHandler` on a worker thread, because engine calls may block while the
cleaner frees segments. A `CleanerWorker` thread cleans whenever the free pool
drops below its target and drives the engine's periodic policy work.
"""
# Imports from standard library.
import asyncio
from concurrent.futures import ThreadPoolExecutor
import threading
from typing import Optional
# Imports from third-party modules.
from loguru import logger
# Imports from local modules.
from memshare.config import EngineConfig, with_overrides
from memshare.engine import Engine
from memshare.protocol import ProtocolHandler, Session
from memshare.segment import AppId

_READ_SIZE = 64 * 1024


class CleanerWorker(threading.Thread):
    """Background thread running cleaning passes and ticks for a server-mode engine."""

    def __init__(self, engine: Engine):
        super().__init__(name='memshare-cleaner', daemon=True)
        self.engine = engine
        self._stopped = threading.Event()

    def run(self) -> None:
        """Clean while the free pool is low; tick at least every tick interval."""
        interval: float = self.engine.config.tick_interval
        while not self._stopped.is_set():
            self.engine.cleaning_wanted.wait(timeout=interval)
            self.engine.cleaning_wanted.clear()
            now: int = self.engine.clock.advance()
            if self.engine.store.needs_cleaning():
                reports = self.engine.cleaner.clean(now)
                logger.debug(f'background cleaning ran {len(reports)} passes')
            self.engine.tick(now)

    def stop(self) -> None:
        """Ask the thread to finish after its current iteration."""
        self._stopped.set()
        self.engine.cleaning_wanted.set()


class MemshareServer:
    """An asyncio TCP listener serving one engine.

    Args:
       engine (:obj:`Engine`): a server-mode engine.
       host (:obj:`str`)
       port (:obj:`int`): 0 picks a free port.
       listener_tenant (:obj:`AppId`, optional): tenant of every connection that
          does not send a ``tenant`` command.
       workers (:obj:`int`): request worker threads.

    """

    def __init__(self, engine: Engine, host: str = '127.0.0.1', port: int = 11211,
                 listener_tenant: Optional[AppId] = None, workers: int = 8):
        self.engine = engine
        self.host = host
        self.port = port
        self.handler = ProtocolHandler(engine, listener_tenant)
        self.cleaner = CleanerWorker(engine)
        self._executor = ThreadPoolExecutor(max_workers=workers,
                                            thread_name_prefix='memshare-request')
        self._server: Optional[asyncio.AbstractServer] = None

    @classmethod
    def from_config(cls, config: EngineConfig) -> 'MemshareServer':
        """Build a server-mode engine and a server from ``config``."""
        engine: Engine = Engine.from_config(with_overrides(config, mode='server'))
        tenant: Optional[AppId] = (AppId(config.listener_tenant)
                                   if config.listener_tenant is not None else None)
        return cls(engine, config.host, config.port, tenant)

    async def handle_client(self, reader: asyncio.StreamReader,
                            writer: asyncio.StreamWriter) -> None:
        """Serve one connection until the client quits or disconnects."""
        session: Session = self.handler.new_session()
        peer = writer.get_extra_info('peername')
        logger.info(f'client {peer} connected as session {session.connection_id}')
        loop = asyncio.get_running_loop()
        try:
            while not session.closed:
                data: bytes = await reader.read(_READ_SIZE)
                if not data:
                    break
                response: bytes = await loop.run_in_executor(self._executor, self.handler.feed,
                                                             session, data)
                if response:
                    writer.write(response)
                    await writer.drain()
        except ConnectionResetError:
            logger.info(f'client {peer} reset the connection')
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass
            logger.info(f'session {session.connection_id} closed')

    async def start(self) -> None:
        """Start listening and start the cleaner worker."""
        self.cleaner.start()
        self._server = await asyncio.start_server(self.handle_client, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.success(f'memshare listening on {self.host}:{self.port}')

    async def serve_forever(self) -> None:
        """Start and serve until cancelled."""
        await self.start()
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        """Stop listening, stop the cleaner worker and the request workers."""
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self.cleaner.stop()
        self._executor.shutdown(wait=False)


def run_server(config: EngineConfig) -> None:
    """Serve ``config`` until interrupted."""
    server: MemshareServer = MemshareServer.from_config(config)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        logger.info('interrupted, shutting down')
