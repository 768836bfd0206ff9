"""Websocket host around the session engine.

The host owns the sockets and nothing else: every inbound frame is handed
to the engine under one lock (mutations stay totally ordered), and the
resulting messages fan out through per-client outboxes.  A slow client
never blocks the session: guidance frames conflate to the latest value in
its outbox while control messages (scene, acks, errors) queue reliably.
"""

from __future__ import annotations

import asyncio
import json
from collections import deque

from websockets.asyncio.server import serve as ws_serve

from .engine import BROADCAST_TYPES, SessionEngine
from .scene import SceneBundle
from .wire import encode

CONFLATABLE = ("guidance", "two_ring")


class _Outbox:
    """Per-client outbound buffer with latest-wins guidance frames."""

    def __init__(self):
        self._reliable = deque()
        self._latest = {}
        self._ready = asyncio.Event()

    def put(self, msg: dict) -> None:
        if msg["type"] in CONFLATABLE:
            self._latest[msg["type"]] = msg
        else:
            self._reliable.append(msg)
        self._ready.set()

    async def get(self) -> dict:
        while True:
            if self._reliable:
                return self._reliable.popleft()
            for key in CONFLATABLE:
                if key in self._latest:
                    return self._latest.pop(key)
            self._ready.clear()
            await self._ready.wait()


class GuidanceServer:
    def __init__(self, bundle: SceneBundle, filter_enabled: bool = True,
                 seed: int = 0, record_path=None, **engine_kw):
        self.engine = SessionEngine(bundle, filter_enabled=filter_enabled,
                                    seed=seed, **engine_kw)
        self._lock = asyncio.Lock()
        self._outboxes: set[_Outbox] = set()
        self._record = open(record_path, "w") if record_path else None

    def close(self) -> None:
        if self._record:
            self._record.close()
            self._record = None

    def _record_line(self, direction: str, raw: str) -> None:
        if self._record:
            self._record.write(json.dumps({"dir": direction, "raw": raw})
                               + "\n")
            self._record.flush()

    def _dispatch(self, msgs: list[dict], sender: _Outbox) -> None:
        for msg in msgs:
            self._record_line("out", encode(msg))
            if msg["type"] in BROADCAST_TYPES:
                for outbox in self._outboxes:
                    outbox.put(msg)
            else:
                sender.put(msg)

    async def handler(self, ws) -> None:
        outbox = _Outbox()
        self._outboxes.add(outbox)
        send_task = asyncio.create_task(self._send_loop(ws, outbox))
        try:
            async with self._lock:
                for msg in self.engine.connect_messages():
                    self._record_line("out", encode(msg))
                    outbox.put(msg)
            async for raw in ws:
                if isinstance(raw, bytes):
                    raw = raw.decode("utf-8", errors="replace")
                async with self._lock:
                    self._record_line("in", raw)
                    self._dispatch(self.engine.handle_raw(raw), outbox)
        finally:
            self._outboxes.discard(outbox)
            send_task.cancel()

    async def _send_loop(self, ws, outbox: _Outbox) -> None:
        while True:
            msg = await outbox.get()
            await ws.send(encode(msg))


async def start_server(bundle: SceneBundle, host: str = "127.0.0.1",
                       port: int = 0, **kw):
    """Bind and return (websocket server, guidance server, actual port).

    The caller keeps it alive with `await server.serve_forever()` and stops
    it with `server.close()`."""
    gs = GuidanceServer(bundle, **kw)
    server = await ws_serve(gs.handler, host, port)
    actual = server.sockets[0].getsockname()[1]
    return server, gs, actual
