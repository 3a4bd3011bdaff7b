"""Socket plumbing: a threaded frame server and a pooled request/response client."""

from __future__ import annotations

import logging
import socket
import threading
from collections import defaultdict
from typing import Callable, Optional

from spotstore.core import ProtocolError, StoreError
from spotstore import wire

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0

Handler = Callable[[wire.Message, str], Optional[wire.Message]]


class ConnectionLost(ConnectionError):
    """The peer refused, reset or closed the connection."""

    def __init__(self, address: str, reason: str = ""):
        super().__init__(f"{address}: {reason}" if reason else address)
        self.address = address


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise ProtocolError(f"malformed address {address!r}, expected host:port")
    return host, int(port)


def format_address(host: str, port: int) -> str:
    return f"{host}:{port}"


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise EOFError("connection closed")
        got += k
    return bytes(buf)


def read_message(sock: socket.socket) -> wire.Message:
    length, cls = wire.decode_header(recv_exact(sock, wire.HEADER_SIZE))
    return cls.from_payload(recv_exact(sock, length) if length else b"")


class RpcServer:
    """Accepts connections and answers each frame with ``handler(msg, peer_host)``.

    A handler returning ``None`` sends no reply. ``StoreError`` raised by the
    handler becomes an ``ErrorResponse``.
    """

    def __init__(self, handler: Handler, listen: str = "127.0.0.1:0", name: str = "rpc"):
        host, port = parse_address(listen)
        self.handler = handler
        self.name = name
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.address = format_address(host, self._listener.getsockname()[1])
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self._accept_loop, name=f"{self.name}-accept", daemon=True)
        self._thread.start()
        return self

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                if self._closed.is_set():
                    conn.close()
                    break
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn, peer[0]),
                             name=f"{self.name}-conn", daemon=True).start()

    def _serve(self, conn: socket.socket, peer: str) -> None:
        try:
            while not self._closed.is_set():
                try:
                    msg = read_message(conn)
                except (EOFError, OSError):
                    return
                except ProtocolError as e:
                    conn.sendall(wire.encode_message(wire.ErrorResponse(int(e.code), e.message)))
                    return
                try:
                    reply = self.handler(msg, peer)
                except StoreError as e:
                    reply = wire.ErrorResponse(int(e.code), e.message)
                except Exception as e:  # noqa: BLE001 - never let a handler kill the connection silently
                    log.exception("%s: handler failed on %s", self.name, type(msg).__name__)
                    reply = wire.ErrorResponse(int(ProtocolError.code), f"internal error: {e}")
                if reply is None:
                    continue
                try:
                    conn.sendall(wire.encode_message(reply))
                except OSError:
                    return
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()

    def close(self) -> None:
        """Stop accepting and drop every open connection."""
        with self._lock:
            if self._closed.is_set():
                return
            self._closed.set()
            conns = list(self._conns)
        for s in [self._listener, *conns]:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


class ConnectionPool:
    """Thread-safe pool of idle connections keyed by address."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self._idle: dict[str, list[socket.socket]] = defaultdict(list)
        self._lock = threading.Lock()

    def _checkout(self, address: str) -> socket.socket:
        with self._lock:
            idle = self._idle.get(address)
            if idle:
                return idle.pop()
        try:
            sock = socket.create_connection(parse_address(address), timeout=self.timeout)
        except OSError as e:
            raise ConnectionLost(address, str(e)) from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def _checkin(self, address: str, sock: socket.socket) -> None:
        with self._lock:
            self._idle[address].append(sock)

    def call(self, address: str, msg: wire.Message, expect: type | None = None) -> wire.Message:
        sock = self._checkout(address)
        try:
            sock.sendall(wire.encode_message(msg))
            reply = read_message(sock)
        except (OSError, EOFError) as e:
            sock.close()
            raise ConnectionLost(address, str(e) or type(e).__name__) from None
        except ProtocolError:
            sock.close()
            raise
        self._checkin(address, sock)
        if isinstance(reply, wire.ErrorResponse):
            raise StoreError.from_code(reply.code, reply.message)
        if expect is not None and not isinstance(reply, expect):
            raise ProtocolError(f"expected {expect.__name__}, got {type(reply).__name__}")
        return reply

    def send_and_wait_close(self, address: str, msg: wire.Message) -> None:
        """Send a message that has no reply and wait until the peer hangs up."""
        try:
            sock = socket.create_connection(parse_address(address), timeout=self.timeout)
        except OSError as e:
            raise ConnectionLost(address, str(e)) from None
        try:
            sock.sendall(wire.encode_message(msg))
            while sock.recv(4096):
                pass
        except OSError:
            pass
        finally:
            sock.close()
        self.discard(address)

    def discard(self, address: str) -> None:
        with self._lock:
            conns = self._idle.pop(address, [])
        for s in conns:
            s.close()

    def close(self) -> None:
        with self._lock:
            idle, self._idle = self._idle, defaultdict(list)
        for conns in idle.values():
            for s in conns:
                s.close()
