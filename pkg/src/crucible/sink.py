"""Local HTTP endpoint that records everything POSTed to it.

This stands in for the attacker's collection server. It accepts any path,
answers 200 to keep the sender happy, and keeps an ordered in-memory log
of captures for later inspection.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

logger = logging.getLogger(__name__)


class BindError(Exception):
    """The sink could not bind its listening socket."""


@dataclass(frozen=True)
class SinkCapture:
    """One recorded POST. ``seq`` starts at 1 and totally orders captures."""

    seq: int
    received_at: str
    path: str
    headers: dict[str, str]
    body: bytes
    body_json: Any = None
    has_json: bool = False

    def to_json(self) -> dict:
        obj: dict[str, Any] = {
            "seq": self.seq,
            "received_at": self.received_at,
            "path": self.path,
            "headers": dict(self.headers),
            "body": self.body.decode("utf-8", errors="replace"),
        }
        if self.has_json:
            obj["body_json"] = self.body_json
        return obj


class _SinkHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, format: str, *args) -> None:
        logger.debug("sink: " + format, *args)

    def _refuse(self, status: int, message: str) -> None:
        payload = json.dumps({"ok": False, "error": message}).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_POST(self) -> None:
        # Streaming uploads are refused so every capture is a complete body.
        if self.headers.get("Transfer-Encoding") is not None:
            self._refuse(411, "chunked bodies not accepted")
            return
        length_header = self.headers.get("Content-Length")
        if length_header is None:
            self._refuse(411, "Content-Length required")
            return
        try:
            length = int(length_header)
            if length < 0:
                raise ValueError
        except ValueError:
            self._refuse(411, "bad Content-Length")
            return
        body = self.rfile.read(length)
        self.server.sink._record(self.path, dict(self.headers.items()), body)
        payload = b'{"ok":true}'
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _read_only(self) -> None:
        self._refuse(405, "sink only accepts POST")

    do_GET = _read_only
    do_PUT = _read_only
    do_DELETE = _read_only
    do_PATCH = _read_only
    do_HEAD = _read_only


class _SinkServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, sink: "CaptureSink"):
        super().__init__(address, _SinkHandler)
        self.sink = sink


class CaptureSink:
    """Threaded HTTP server recording POST bodies in arrival order."""

    def __init__(self, port: int = 0, host: str = "127.0.0.1",
                 on_capture: Callable[[SinkCapture], None] | None = None):
        self._lock = threading.Lock()
        self._captures: list[SinkCapture] = []
        self._on_capture = on_capture
        try:
            self._server = _SinkServer((host, port), self)
        except OSError as exc:
            raise BindError(f"cannot bind sink on {host}:{port}: {exc}") from exc
        self.host, self.port = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="capture-sink", daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def _record(self, path: str, headers: dict[str, str], body: bytes) -> None:
        try:
            body_json = json.loads(body.decode("utf-8"))
            has_json = True
        except (UnicodeDecodeError, json.JSONDecodeError):
            body_json = None
            has_json = False
        with self._lock:
            capture = SinkCapture(
                seq=len(self._captures) + 1,
                received_at=datetime.now(timezone.utc).isoformat(),
                path=path,
                headers=headers,
                body=body,
                body_json=body_json,
                has_json=has_json,
            )
            self._captures.append(capture)
        if self._on_capture is not None:
            self._on_capture(capture)

    def captures(self) -> list[SinkCapture]:
        with self._lock:
            return list(self._captures)

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5.0)
