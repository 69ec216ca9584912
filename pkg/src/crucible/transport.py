"""Client-side channels to servers: spawned subprocess stdio or loopback.

Both channels carry the same newline-delimited frames, so a scripted
exchange produces identical envelope sequences either way. There is no
constructor joining two server ends: every byte path has the client on
one side, which is what keeps all cross-server flow mediated.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import subprocess
import threading
from typing import Any, Callable

from .manifest import ServerManifest
from .service import PROTOCOL_VERSION
from .wire import Envelope, EndOfStream, ErrorObject, WireError, decode, encode, read_frame

logger = logging.getLogger(__name__)

# Per-request hang guard, not a policy knob.
REQUEST_TIMEOUT_S = 10.0
CLOSE_GRACE_S = 2.0

STATE_NEW = "new"
STATE_INITIALIZED = "initialized"
STATE_CLOSED = "closed"

# direction, server_id, envelope
MessageHook = Callable[[str, str, Envelope], None]


class TransportError(Exception):
    """Base class for channel failures."""


class SpawnError(TransportError):
    """The server process could not be started."""


class TransportClosed(TransportError):
    """The channel is closed or the peer went away."""


class ProtocolViolation(TransportError):
    """The peer broke the wire contract (bad frame, wrong id)."""


class RequestTimeout(TransportError):
    """No response arrived within the hang-guard window."""


class RemoteError(TransportError):
    """The server answered with an error envelope."""

    def __init__(self, error: ErrorObject):
        super().__init__(f"remote error {error.code}: {error.message}")
        self.error = error


class Connection:
    """The client end of one channel to one server.

    Requests are strictly sequential (one in flight); ids are assigned
    1, 2, 3, ... with no gaps. Not safe for sharing across threads.
    """

    def __init__(self, server_id: str, reader, writer, proc=None, sockets=(), on_message: MessageHook | None = None):
        self.server_id = server_id
        self.state = STATE_NEW
        self.next_id = 1
        self.manifest: ServerManifest | None = None
        self._writer = writer
        self._proc = proc
        self._sockets = tuple(sockets)
        self._on_message = on_message
        self._frames: queue.Queue = queue.Queue()
        self._reader_thread = threading.Thread(
            target=self._read_loop, args=(reader,), name=f"read-{server_id}", daemon=True
        )
        self._reader_thread.start()

    def _read_loop(self, reader) -> None:
        try:
            while True:
                try:
                    self._frames.put(read_frame(reader))
                except EndOfStream:
                    return
                except (OSError, ValueError):
                    return
        finally:
            self._frames.put(None)

    def _emit(self, direction: str, env: Envelope) -> None:
        if self._on_message is not None:
            self._on_message(direction, self.server_id, env)

    def request(self, method: str, params: Any = None) -> Any:
        """Send one request and block for its response's result."""
        if self.state == STATE_CLOSED:
            raise TransportClosed(f"connection to {self.server_id} is closed")
        request_id = self.next_id
        self.next_id += 1
        env = Envelope.request(request_id, method, params)
        try:
            self._writer.write(encode(env))
            self._writer.flush()
        except (OSError, ValueError) as exc:
            raise TransportClosed(f"write to {self.server_id} failed: {exc}") from exc
        self._emit("out", env)

        try:
            raw = self._frames.get(timeout=REQUEST_TIMEOUT_S)
        except queue.Empty:
            raise RequestTimeout(f"{self.server_id}: no response to {method} within {REQUEST_TIMEOUT_S}s")
        if raw is None:
            raise TransportClosed(f"{self.server_id} closed the stream")
        try:
            reply = decode(raw)
        except WireError as exc:
            raise ProtocolViolation(f"{self.server_id} sent an undecodable frame: {exc}") from exc
        self._emit("in", reply)
        if reply.kind != "response":
            raise ProtocolViolation(f"{self.server_id} sent a {reply.kind} instead of a response")
        if reply.id != request_id:
            raise ProtocolViolation(f"{self.server_id} answered id {reply.id}, expected {request_id}")
        if reply.error is not None:
            raise RemoteError(reply.error)
        return reply.result

    def initialize(self) -> ServerManifest:
        """Run the handshake; stores and returns the server's manifest."""
        result = self.request("initialize", {})
        if not isinstance(result, dict) or result.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolViolation(f"{self.server_id}: unexpected initialize reply")
        self.manifest = ServerManifest.from_json(result.get("manifest"))
        self.state = STATE_INITIALIZED
        return self.manifest

    def close(self) -> None:
        """Close the client end; for subprocess servers this is the shutdown
        signal, and the child gets a short grace period before termination."""
        if self.state == STATE_CLOSED:
            return
        self.state = STATE_CLOSED
        try:
            self._writer.close()
        except (OSError, ValueError):
            pass
        if self._proc is not None:
            try:
                self._proc.wait(timeout=CLOSE_GRACE_S)
            except subprocess.TimeoutExpired:
                logger.warning("server %s ignored shutdown; terminating", self.server_id)
                self._proc.terminate()
                try:
                    self._proc.wait(timeout=CLOSE_GRACE_S)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                    self._proc.wait()
        for sock in self._sockets:
            try:
                sock.close()
            except OSError:
                pass
        self._reader_thread.join(timeout=CLOSE_GRACE_S)

    @property
    def child_process(self):
        return self._proc


def spawn_server(
    command: list[str],
    server_id: str,
    env: dict[str, str] | None = None,
    on_message: MessageHook | None = None,
) -> Connection:
    """Start a server subprocess whose stdin/stdout carry the wire protocol.

    stderr is inherited so server diagnostics stay off the wire.
    """
    if not command:
        raise SpawnError("empty command")
    child_env = dict(os.environ)
    if env:
        child_env.update(env)
    try:
        proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=None,
            env=child_env,
        )
    except OSError as exc:
        raise SpawnError(f"cannot start {command[0]!r}: {exc}") from exc
    return Connection(server_id, proc.stdout, proc.stdin, proc=proc, on_message=on_message)


def loopback_pair(
    server_logic: Callable[[Any, Any], None],
    server_id: str,
    on_message: MessageHook | None = None,
) -> tuple[Connection, threading.Thread]:
    """Connect a client end to ``server_logic`` running on an in-process pair.

    ``server_logic(reader, writer)`` sees exactly the framing a subprocess
    server sees on stdio. Returns the client Connection and the server task.
    """
    client_sock, server_sock = socket.socketpair()
    server_reader = server_sock.makefile("rb")
    server_writer = server_sock.makefile("wb")

    def run() -> None:
        try:
            server_logic(server_reader, server_writer)
        except (OSError, ValueError):
            pass
        finally:
            for f in (server_reader, server_writer):
                try:
                    f.close()
                except (OSError, ValueError):
                    pass
            server_sock.close()

    task = threading.Thread(target=run, name=f"server-{server_id}", daemon=True)
    task.start()
    conn = Connection(
        server_id,
        client_sock.makefile("rb"),
        client_sock.makefile("wb"),
        sockets=(client_sock,),
        on_message=on_message,
    )
    return conn, task
