"""
Live monitor for a running reconstruction, served over a FastAPI websocket.

    WS /monitor_ws    status message on connect, then every Reconstructor message
                      (Checkpoint, EpochDone, Finished, Diverged). Clients may send
                      {"type": "Stop"}.
"""

import asyncio
from contextlib import asynccontextmanager
import json
import logging
import queue
import threading
from typing import Any, Dict, Optional, Set

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.encoders import jsonable_encoder

from .Reconstructor import Reconstructor

logger = logging.getLogger(__name__)

# Client message types forwarded to the Reconstructor
CLIENT_COMMANDS = {"Stop"}

RELAY_POLL_S = 0.05

# Status messages held for the relay before the oldest are dropped
STATUS_QUEUE_SIZE = 256


def ws_json(obj: Any) -> str:
    return json.dumps(jsonable_encoder(obj))


def _errorMsg(error: str) -> Dict[str, Any]:
    return {"type": "Error", "data": {"error": error}}


class DropOldestQueue(queue.Queue):
    """
    Bounded queue whose put() never blocks the producer: when full, the oldest
    message is discarded.
    """

    def put(self, item, block=True, timeout=None):
        with self.not_full:
            if 0 < self.maxsize <= self._qsize():
                self._get()
                self.unfinished_tasks -= 1
            self._put(item)
            self.unfinished_tasks += 1
            self.not_empty.notify()


class ReconstructorWeb:
    """
    Connects the Reconstructor's thread-side queues to the websocket clients. A relay
    thread moves status messages onto the event loop, where they are sent to every
    connected client.
    """

    def __init__(self, reconstructor: Reconstructor, stopEvent: threading.Event):
        self.reconstructor = reconstructor
        self.statusQueue: "queue.Queue[Dict[str, Any]]" = DropOldestQueue(STATUS_QUEUE_SIZE)
        self.commandQueue: "queue.Queue[Dict[str, Any]]" = queue.Queue()
        reconstructor.addOutputQueue(self.statusQueue)
        reconstructor.addInputQueue(self.commandQueue)

        self.clients: Set[WebSocket] = set()
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._relayThread: Optional[threading.Thread] = None
        self._stopEvent = stopEvent

    def bindLoop(self, loop: Optional[asyncio.AbstractEventLoop]):
        self._loop = loop
        if loop is not None and self._relayThread is None:
            self._relayThread = threading.Thread(target=self._relayMessages, name="monitor-relay", daemon=True)
            self._relayThread.start()

    def _relayMessages(self):
        while not self._stopEvent.is_set():
            try:
                msg = self.statusQueue.get(timeout=RELAY_POLL_S)
            except queue.Empty:
                continue
            loop = self._loop
            if loop is None or loop.is_closed():
                continue
            try:
                asyncio.run_coroutine_threadsafe(self.broadcast(msg), loop)
            except RuntimeError:
                # loop shut down between the check and the call
                pass

    async def broadcast(self, msg: Dict[str, Any]):
        payload = ws_json(msg)
        for client in list(self.clients):
            try:
                await client.send_text(payload)
            except Exception as e:
                logger.debug(f"Dropping monitor client {getattr(client, 'client', None)}: {e}")
                self.clients.discard(client)

    def handleClientMessage(self, raw: str) -> Optional[Dict[str, Any]]:
        """
        Queue an accepted client command for the Reconstructor. Returns the error
        reply for anything else.
        """
        try:
            msg = json.loads(raw)
        except ValueError:
            return _errorMsg("invalid json")

        if not isinstance(msg, dict) or msg.get("type") not in CLIENT_COMMANDS:
            return _errorMsg("unsupported message")

        logger.info(f"Monitor client command: {msg['type']}")
        self.commandQueue.put(msg)
        return None


def create_app(bridge: ReconstructorWeb) -> FastAPI:

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        bridge.bindLoop(asyncio.get_running_loop())
        logger.info("Monitor websocket ready")
        yield
        bridge.bindLoop(None)
        logger.info("Monitor websocket closed")

    app = FastAPI(title="ptycho-ad monitor", lifespan=lifespan)

    @app.websocket("/monitor_ws")
    async def monitorSocket(ws: WebSocket):
        await ws.accept()
        peer = getattr(ws, 'client', None)
        logger.info(f"Monitor client connected: {peer}")
        await ws.send_text(ws_json(bridge.reconstructor.getJsonStatusMsg()))
        bridge.clients.add(ws)

        try:
            while True:
                reply = bridge.handleClientMessage(await ws.receive_text())
                if reply is not None:
                    await ws.send_text(ws_json(reply))
        except WebSocketDisconnect:
            logger.info(f"Monitor client disconnected: {peer}")
        finally:
            bridge.clients.discard(ws)

    return app


def exitOnStop(server: Any, stopEvent: threading.Event) -> threading.Thread:
    """
    Start a thread that asks `server` (a uvicorn.Server) to exit once stopEvent is set.
    """
    def _watch():
        stopEvent.wait()
        logger.info("Stopping monitor websocket")
        server.should_exit = True

    watcher = threading.Thread(target=_watch, name="monitor-stop", daemon=True)
    watcher.start()
    return watcher


def monitorWebsocketRun(reconstructor: Reconstructor, host: str, port: int, stopEvent: threading.Event):
    import uvicorn

    server = uvicorn.Server(uvicorn.Config(create_app(ReconstructorWeb(reconstructor, stopEvent)), host=host, port=port, log_level="info"))
    exitOnStop(server, stopEvent)
    server.run()
