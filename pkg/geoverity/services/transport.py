"""transport.py — moving whole frames over byte streams and WebSockets.

Frames are self-delimiting (the header carries the payload length), so a
stream channel reads the fixed header first and then exactly the rest.
"""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Awaitable, Callable, Hashable
from typing import Any, Generic, Protocol, TypeVar

import aiohttp
from aiohttp import web

from geoverity.services.wire import HEADER_SIZE, frame_length

logger = logging.getLogger(__name__)

K = TypeVar("K", bound=Hashable)


class TransportError(RuntimeError):
    pass


class FrameChannel(Protocol):
    name: str

    async def send(self, frame: bytes) -> None: ...

    async def recv(self) -> bytes | None:
        """Next frame, or None once the other side has gone away."""
        ...

    async def close(self) -> None: ...


class StreamChannel:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._reader = reader
        self._writer = writer
        self._send_lock = asyncio.Lock()
        peer = writer.get_extra_info("peername")
        self.name = f"{peer[0]}:{peer[1]}" if isinstance(peer, tuple) else "stream"

    @classmethod
    async def connect(cls, host: str, port: int, *, timeout_s: float = 5.0) -> StreamChannel:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout_s)
        return cls(reader, writer)

    async def send(self, frame: bytes) -> None:
        async with self._send_lock:
            self._writer.write(frame)
            await self._writer.drain()

    async def recv(self) -> bytes | None:
        try:
            header = await self._reader.readexactly(HEADER_SIZE)
            rest = await self._reader.readexactly(frame_length(header) - HEADER_SIZE)
        except (asyncio.IncompleteReadError, ConnectionError):
            return None
        return header + rest

    async def close(self) -> None:
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass


class WebSocketChannel:
    """Same frames, one per binary WebSocket message."""

    def __init__(self, ws: web.WebSocketResponse | aiohttp.ClientWebSocketResponse, name: str = "ws") -> None:
        self._ws = ws
        self.name = name

    async def send(self, frame: bytes) -> None:
        await self._ws.send_bytes(frame)

    async def recv(self) -> bytes | None:
        while True:
            msg = await self._ws.receive()
            if msg.type is aiohttp.WSMsgType.BINARY:
                return msg.data
            if msg.type in (aiohttp.WSMsgType.CLOSE, aiohttp.WSMsgType.CLOSING, aiohttp.WSMsgType.CLOSED):
                return None
            if msg.type is aiohttp.WSMsgType.ERROR:
                logger.warning("WS_ERROR: channel=%s error=%s", self.name, self._ws.exception())
                return None
            logger.debug("WS_IGNORED: channel=%s type=%s", self.name, msg.type)

    async def close(self) -> None:
        await self._ws.close()


ChannelHandler = Callable[[FrameChannel], Awaitable[None]]


async def serve_streams(handler: ChannelHandler, host: str, port: int) -> asyncio.Server:
    async def _on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        channel = StreamChannel(reader, writer)
        try:
            await handler(channel)
        except Exception:
            logger.exception("Connection handler failed: peer=%s", channel.name)
        finally:
            await channel.close()

    server = await asyncio.start_server(_on_connect, host, port)
    logger.info("Listening: host=%s port=%s", host, port)
    return server


def websocket_app(handler: ChannelHandler, path: str = "/ws") -> web.Application:
    async def _ws_route(request: web.Request) -> web.WebSocketResponse:
        ws = web.WebSocketResponse()
        await ws.prepare(request)
        channel = WebSocketChannel(ws, name=request.remote or "ws")
        try:
            await handler(channel)
        except Exception:
            logger.exception("WebSocket handler failed: peer=%s", channel.name)
        finally:
            await ws.close()
        return ws

    app = web.Application()
    app.router.add_get(path, _ws_route)
    return app


async def serve_websocket(handler: ChannelHandler, host: str, port: int, path: str = "/ws") -> web.AppRunner:
    runner = web.AppRunner(websocket_app(handler, path))
    await runner.setup()
    await web.TCPSite(runner, host, port).start()
    logger.info("Listening (websocket): host=%s port=%s path=%s", host, port, path)
    return runner


class PendingReplies(Generic[K]):
    """Futures for replies that arrive on a channel read by someone else."""

    def __init__(self) -> None:
        self._waiting: dict[K, asyncio.Future[Any]] = {}

    def expect(self, key: K) -> asyncio.Future[Any]:
        future: asyncio.Future[Any] = asyncio.get_running_loop().create_future()
        self._waiting[key] = future
        return future

    def resolve(self, key: K, value: Any) -> bool:
        future = self._waiting.pop(key, None)
        if future is None or future.done():
            return False
        future.set_result(value)
        return True

    def discard(self, key: K) -> None:
        future = self._waiting.pop(key, None)
        if future is not None and not future.done():
            future.cancel()

    def fail_all(self, exc: BaseException) -> None:
        for future in self._waiting.values():
            if not future.done():
                future.set_exception(exc)
        self._waiting.clear()

    async def wait(self, key: K, future: asyncio.Future[Any], timeout_s: float) -> Any:
        try:
            return await asyncio.wait_for(future, timeout_s)
        finally:
            self._waiting.pop(key, None)
