"""TCP transport for the wire protocol.

Each sensor runs one listener.  Children hold a persistent upward connection
and push one data line per window; diagnosis commands travel downward on
short-lived request/response connections.  Statistic pushes are droppable
(the parent substitutes the child's last known values), so exhausting the
retry budget on a data line is logged and swallowed; command traffic surfaces
Unreachable to the caller instead.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time

from msnmon import wire
from msnmon.errors import ProtocolError, Unreachable

logger = logging.getLogger(__name__)

MAX_LINE_BYTES = 4 * 1024 * 1024


class SensorServer:
    """Line-oriented listener dispatching decoded messages.

    ``on_data`` is called with each DataMessage (from child connections);
    ``on_command`` is called with a CommandMessage and must return a
    ResponseMessage, which is written back on the same connection.
    Malformed lines are counted and skipped; the connection survives.
    """

    def __init__(self, host: str, port: int, on_data, on_command=None):
        self.on_data = on_data
        self.on_command = on_command
        self.protocol_errors = 0
        self.data_received = 0
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    try:
                        line = self.rfile.readline(MAX_LINE_BYTES)
                    except OSError:
                        return
                    if not line:
                        return
                    try:
                        msg = wire.decode(line.decode("utf-8", errors="strict"))
                    except (ProtocolError, UnicodeDecodeError) as exc:
                        outer.protocol_errors += 1
                        logger.warning("dropped undecodable line: %s", exc)
                        continue
                    try:
                        if isinstance(msg, wire.DataMessage):
                            outer.data_received += 1
                            outer.on_data(msg)
                        elif isinstance(msg, wire.CommandMessage):
                            if outer.on_command is None:
                                logger.warning("no command handler; ignoring %s", msg)
                                continue
                            resp = outer.on_command(msg)
                            self.wfile.write(wire.encode(resp).encode("utf-8"))
                            self.wfile.flush()
                        else:
                            logger.warning("unexpected %s on listener", type(msg).__name__)
                    except BrokenPipeError:
                        return
                    except Exception:
                        logger.exception("handler error; connection continues")

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.address = self._server.server_address
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"listener:{self.address[1]}",
            daemon=True,
        )

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


class UpstreamLink:
    """Persistent connection a child uses to push statistics to its parent."""

    def __init__(self, addr: tuple[str, int], retries: int = 3,
                 backoff_s: float = 0.05, timeout_s: float = 5.0):
        self.addr = addr
        self.retries = retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self.sent = 0
        self.dropped = 0

    def _connect(self) -> socket.socket:
        sock = socket.create_connection(self.addr, timeout=self.timeout_s)
        sock.settimeout(self.timeout_s)
        return sock

    def send(self, msg: wire.Message) -> bool:
        """At-most-once delivery with bounded retry; True if handed to the OS."""
        payload = wire.encode(msg).encode("utf-8")
        with self._lock:
            delay = self.backoff_s
            for attempt in range(self.retries):
                try:
                    if self._sock is None:
                        self._sock = self._connect()
                    self._sock.sendall(payload)
                    self.sent += 1
                    return True
                except OSError as exc:
                    if self._sock is not None:
                        try:
                            self._sock.close()
                        except OSError:
                            pass
                        self._sock = None
                    if attempt + 1 < self.retries:
                        time.sleep(delay)
                        delay *= 2
                    else:
                        logger.warning("dropping message to %s: %s", self.addr, exc)
            self.dropped += 1
            return False

    def close(self):
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                except OSError:
                    pass
                self._sock = None


def request_response(
    addr: tuple[str, int],
    cmd: wire.CommandMessage,
    timeout_s: float = 10.0,
    retries: int = 3,
    backoff_s: float = 0.05,
) -> wire.ResponseMessage:
    """Send one command and wait for its response line.

    Command traffic is analyst-interactive, so failure is surfaced as
    Unreachable rather than silently dropped.
    """
    payload = wire.encode(cmd).encode("utf-8")
    delay = backoff_s
    last_exc: Exception | None = None
    for attempt in range(retries):
        try:
            with socket.create_connection(addr, timeout=timeout_s) as sock:
                sock.settimeout(timeout_s)
                sock.sendall(payload)
                reader = sock.makefile("rb")
                line = reader.readline(MAX_LINE_BYTES)
                if not line:
                    raise ConnectionError("peer closed without responding")
                msg = wire.decode(line.decode("utf-8"))
                if not isinstance(msg, wire.ResponseMessage):
                    raise ProtocolError(f"expected a response, got {type(msg).__name__}")
                return msg
        except (OSError, ProtocolError) as exc:
            last_exc = exc
            if attempt + 1 < retries:
                time.sleep(delay)
                delay *= 2
    raise Unreachable(f"no response from {addr}: {last_exc}")
