"""Frame transports: direct in-process calls or a loopback TCP stream.

On the stream every frame is preceded by its 4-byte big-endian length.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

from . import wire
from .errors import BindError, MalformedFrame, RemoteError
from .servers import Backend

log = logging.getLogger(__name__)


def _unwrap(frame: bytes) -> bytes:
    if wire.peek_type(frame) is wire.MsgType.ERROR:
        err = wire.decode(frame)
        raise RemoteError(err.kind, err.detail or "")
    return frame


class InProcessTransport:
    def __init__(self, backend: Backend):
        self.backend = backend

    def exchange(self, frame: bytes) -> bytes:
        return _unwrap(self.backend.handle_frame(frame))

    def close(self) -> None:
        pass


class LoopbackTransport:
    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)

    def exchange(self, frame: bytes) -> bytes:
        wire.write_stream_frame(self._sock, frame)
        reply = wire.read_stream_frame(self._sock)
        if reply is None:
            raise ConnectionError("server closed the connection")
        return _unwrap(reply)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        backend: Backend = self.server.backend
        while True:
            try:
                frame = wire.read_stream_frame(self.request)
            except MalformedFrame as exc:
                # length prefix is unusable; answer once and drop the connection
                wire.write_stream_frame(self.request, wire.error_frame(exc.kind, str(exc)))
                return
            except (EOFError, ConnectionError, OSError):
                return
            if frame is None:
                return
            try:
                wire.write_stream_frame(self.request, backend.handle_frame(frame))
            except OSError:
                return


class FrameServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, backend: Backend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        try:
            super().__init__((host, port), _FrameHandler)
        except OSError as exc:
            raise BindError(f"cannot bind {host}:{port}: {exc}") from exc

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="wvsim-serve", daemon=True)
        thread.start()
        return thread


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)
