"""TCP transport on asyncio, behind the same ``Endpoint`` API as the simulator.

Addresses are ``host:port`` strings. A request arriving on an inbound
connection is attributed to a pseudo address ``conn:<n>`` so the reply goes
back on the same socket; protocols that must reach the originator later set
``replyTo`` explicitly. Frames use the shared codec, so bytes on the wire
are identical to what the simulator hashes.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import random
from typing import Callable

from edgekv import wire
from edgekv.errors import ConfigError, ProtocolError
from edgekv.transport.base import Endpoint

log = logging.getLogger(__name__)

CONN_PREFIX = "conn:"


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ConfigError(f"address {address!r} is not host:port")
    return host, int(port)


class _Timer:
    def __init__(self, handle: asyncio.TimerHandle):
        self._handle = handle
        self.live = True

    def cancel(self) -> None:
        self.live = False
        self._handle.cancel()


class _Conn:
    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer

    def write(self, frame: bytes) -> None:
        if not self.writer.is_closing():
            self.writer.write(frame)


class TcpNetwork:
    """One asyncio loop hosting one or more endpoints; each listens on its address."""

    def __init__(self, seed: int = 0, connect_timeout_ms: float = 1000.0):
        self.seed = seed
        self.connect_timeout = connect_timeout_ms / 1000.0
        try:
            self.loop: asyncio.AbstractEventLoop | None = asyncio.get_running_loop()
        except RuntimeError:
            self.loop = None
        self.endpoints: dict[str, Endpoint] = {}
        self.roles: dict[str, str] = {}
        self._servers: list[asyncio.base_events.Server] = []
        self._inbound: dict[str, _Conn] = {}
        self._outbound: dict[tuple[str, str], _Conn] = {}
        self._connecting: dict[tuple[str, str], list[bytes]] = {}
        self._ids = itertools.count(1)
        self._t0 = self.loop.time() if self.loop else 0.0
        self.frames_sent = 0
        self.protocol_errors = 0

    # -- lifecycle ----------------------------------------------------------------------
    def add(self, address: str, role: str) -> Endpoint:
        split_address(address)
        if address in self.endpoints:
            raise ConfigError(f"address {address!r} already registered")
        ep = Endpoint(self, address, role)
        self.endpoints[address] = ep
        self.roles[address] = role
        return ep

    def client(self, role: str = "client") -> Endpoint:
        """An endpoint that only makes outbound requests (no listening socket)."""
        address = f"client-{next(self._ids)}:0"
        ep = Endpoint(self, address, role)
        self.endpoints[address] = ep
        return ep

    async def start(self) -> None:
        """Bind every listening endpoint. ``OSError`` propagates (e.g. port in use)."""
        self.loop = asyncio.get_running_loop()
        self._t0 = self.loop.time()
        for address in list(self.roles):
            host, port = split_address(address)
            server = await asyncio.start_server(
                lambda r, w, address=address: self._on_accept(address, r, w), host, port)
            self._servers.append(server)

    def attach(self) -> None:
        """Use the running loop without listening (client-only processes)."""
        self.loop = asyncio.get_running_loop()
        self._t0 = self.loop.time()

    async def close(self) -> None:
        for ep in self.endpoints.values():
            ep.close()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        for conn in list(self._inbound.values()) + list(self._outbound.values()):
            conn.writer.close()
        self._servers.clear()
        self._inbound.clear()
        self._outbound.clear()

    # -- time ---------------------------------------------------------------------------------
    def now(self) -> float:
        return (self.loop.time() - self._t0) * 1000.0 if self.loop else 0.0

    def rng_for(self, name: str) -> random.Random:
        return random.Random(f"{self.seed}/{name}")

    def call_later(self, owner: Endpoint, delay_ms: float, fn: Callable, *args,
                   background: bool = False) -> _Timer:
        def run():
            if not timer.live or (owner is not None and owner.closed):
                return
            timer.live = False
            fn(*args)

        timer = _Timer(self.loop.call_later(max(0.0, delay_ms) / 1000.0, run))
        return timer

    # -- sending --------------------------------------------------------------------------------
    def transmit(self, src: str, dst: str, env: wire.Envelope) -> None:
        frame = wire.encode(env)
        self.frames_sent += 1
        local = self.endpoints.get(dst)
        if local is not None:
            # same process: still round-trip through the codec
            decoded = wire.decode(frame)[0]
            self.loop.call_soon(local.deliver, decoded, src)
            return
        if dst.startswith(CONN_PREFIX):
            conn = self._inbound.get(dst)
            if conn is not None:
                conn.write(frame)
            return
        key = (src, dst)
        conn = self._outbound.get(key)
        if conn is not None and not conn.writer.is_closing():
            conn.write(frame)
            return
        queue = self._connecting.get(key)
        if queue is not None:
            queue.append(frame)
            return
        self._connecting[key] = [frame]
        self.loop.create_task(self._connect(src, dst))

    async def _connect(self, src: str, dst: str) -> None:
        key = (src, dst)
        try:
            host, port = split_address(dst)
            reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port),
                                                    self.connect_timeout)
        except (OSError, asyncio.TimeoutError, ConfigError) as exc:
            log.debug("connect to %s failed: %s", dst, exc)
            self._connecting.pop(key, None)
            return
        conn = _Conn(writer)
        self._outbound[key] = conn
        for frame in self._connecting.pop(key, []):
            conn.write(frame)
        # replies to our requests come back on this connection
        await self._read_loop(reader, src, dst, conn, lambda: self._outbound.pop(key, None))

    # -- receiving ------------------------------------------------------------------------------------
    async def _on_accept(self, address: str, reader: asyncio.StreamReader,
                         writer: asyncio.StreamWriter) -> None:
        name = f"{CONN_PREFIX}{next(self._ids)}"
        conn = _Conn(writer)
        self._inbound[name] = conn
        await self._read_loop(reader, address, name, conn, lambda: self._inbound.pop(name, None))

    async def _read_loop(self, reader, owner: str, src: str, conn: _Conn, on_close) -> None:
        """Feed frames from one socket to the endpoint ``owner``, attributed to ``src``."""
        frames = wire.FrameReader()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                try:
                    envs = frames.feed(data)
                except ProtocolError as exc:
                    self.protocol_errors += 1
                    log.warning("protocol error from %s: %s; closing connection", src, exc)
                    break
                ep = self.endpoints.get(owner)
                for env in envs:
                    if ep is not None:
                        ep.deliver(env, src)
        except (ConnectionError, OSError):
            pass
        finally:
            on_close()
            conn.writer.close()
