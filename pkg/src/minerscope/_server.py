"""Run an asyncio WebSocket server on a daemon thread (testbed pool, mock browser)."""
from __future__ import annotations

import asyncio
import logging
import threading
from typing import Optional

log = logging.getLogger(__name__)


class ThreadedWsServer:
    name = "ws-server"

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host, self.port = host, port
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._ready = threading.Event()
        self._stop: Optional[asyncio.Future] = None
        self._error: Optional[BaseException] = None

    @property
    def url(self) -> str:
        return f"ws://{self.host}:{self.port}"

    async def handler(self, ws) -> None:  # pragma: no cover - overridden
        raise NotImplementedError

    async def serve(self) -> None:
        """Serve until :meth:`stop`; usable directly from an existing event loop."""
        from websockets.asyncio.server import serve

        self._stop = asyncio.get_running_loop().create_future()
        async with serve(self.handler, self.host, self.port, max_size=None) as server:
            self.port = server.sockets[0].getsockname()[1]
            self._ready.set()
            log.info("%s listening on %s", self.name, self.url)
            await self._stop

    def start(self):
        if self._thread is not None:
            return self

        def run():
            self._loop = asyncio.new_event_loop()
            try:
                self._loop.run_until_complete(self.serve())
            except BaseException as exc:  # surfaced by start()
                self._error = exc
                self._ready.set()
            finally:
                self._loop.close()

        self._thread = threading.Thread(target=run, name=self.name, daemon=True)
        self._thread.start()
        if not self._ready.wait(10) or self._error is not None:
            raise RuntimeError(f"{self.name} failed to start: {self._error}")
        return self

    def call_soon(self, fn, *args) -> None:
        if self._loop is not None:
            self._loop.call_soon_threadsafe(fn, *args)

    def stop(self) -> None:
        if self._loop is not None and self._stop is not None and not self._loop.is_closed():
            self._loop.call_soon_threadsafe(lambda: self._stop.done() or self._stop.set_result(None))
        if self._thread is not None:
            self._thread.join(10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
