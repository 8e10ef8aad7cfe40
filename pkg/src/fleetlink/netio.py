"""Socket plumbing: LF-framed envelope connections and reconnect helpers."""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable

from .errors import NetworkError, ProtocolError
from .protocol import Envelope, decode_envelope, encode_envelope

log = logging.getLogger(__name__)


class LineConnection:
    """One LF-framed JSON envelope per line over a TCP socket.

    Outgoing sequence numbers increase strictly per connection; incoming
    ones are checked per sender and a regression raises ProtocolError
    (the caller decides whether to drop the message or the connection).
    """

    def __init__(self, sock: socket.socket, sender_id: str):
        self.sock = sock
        self.sender_id = sender_id
        self._reader = sock.makefile("rb")
        self._send_lock = threading.Lock()
        self._seq = 0
        self._last_seen: dict[str, int] = {}
        try:
            host, port = sock.getpeername()[:2]
            self.peer = f"{host}:{port}"
        except OSError:
            self.peer = "unknown"

    def send(self, msg_type: str, payload) -> None:
        with self._send_lock:
            self._seq += 1
            env = Envelope(msg_type=msg_type, sender_id=self.sender_id, seq=self._seq, payload=payload)
            data = encode_envelope(env)
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise NetworkError(f"send to {self.peer} failed: {exc}") from exc

    def recv(self) -> Envelope | None:
        """Next envelope, or None on a clean EOF."""
        try:
            line = self._reader.readline()
        except OSError as exc:
            raise NetworkError(f"read from {self.peer} failed: {exc}") from exc
        if not line:
            return None
        env = decode_envelope(line)
        last = self._last_seen.get(env.sender_id)
        if last is not None and env.seq <= last:
            raise ProtocolError(
                f"seq regression from {env.sender_id}: {env.seq} after {last}"
            )
        self._last_seen[env.sender_id] = env.seq
        return env

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def connect(host: str, port: int, sender_id: str, timeout: float = 5.0) -> LineConnection:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    except OSError as exc:
        raise NetworkError(f"cannot connect to {host}:{port}: {exc}") from exc
    return LineConnection(sock, sender_id)


def connect_with_backoff(
    host: str,
    port: int,
    sender_id: str,
    stop: threading.Event,
    base_delay: float = 0.2,
    max_delay: float = 5.0,
    on_attempt: Callable[[int, float], None] | None = None,
) -> LineConnection | None:
    """Retry until connected or ``stop`` is set. Returns None when stopped."""
    delay = base_delay
    attempt = 0
    while not stop.is_set():
        attempt += 1
        try:
            return connect(host, port, sender_id)
        except NetworkError as exc:
            if on_attempt:
                on_attempt(attempt, delay)
            log.debug("connect attempt %d to %s:%s failed (%s); retrying in %.1fs",
                      attempt, host, port, exc, delay)
            if stop.wait(delay):
                return None
            delay = min(delay * 2, max_delay)
    return None


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise NetworkError(f"address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def pick_free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as probe:
        probe.bind((host, 0))
        return probe.getsockname()[1]


def wait_for(predicate: Callable[[], bool], timeout: float, interval: float = 0.05) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
