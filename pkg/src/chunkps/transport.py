"""Reliable, ordered byte transports behind one polling interface.

Two implementations with identical semantics:

* ChannelNetwork: an in-process fabric keyed by string addresses. Sends
  never block; segment order is preserved per connection. Used for
  deterministic single-thread runs and threaded in-process tests.
* TCP over loopback/LAN, nonblocking sockets with internal write
  buffering so a single-threaded event loop can never deadlock on a
  bidirectional flood.

A Poller owns listeners and connections for one event loop and yields
("accept", conn, listener), ("data", conn, bytes) and ("eof", conn, None)
events. The channel poller scans in registration order, so single-thread
runs are fully deterministic.
"""

from __future__ import annotations

import selectors
import socket
import threading
import time
from collections import deque

from .errors import InvalidConfigError, ProtocolError

_RECV_SIZE = 1 << 18


def parse_hostport(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host:
        raise InvalidConfigError(f"expected host:port, got {addr!r}")
    return host, int(port)


def is_tcp_address(addr: str) -> bool:
    host, sep, port = addr.rpartition(":")
    return bool(sep and host and port.isdigit())


# ---------------------------------------------------------------------------
# in-process channel transport
# ---------------------------------------------------------------------------


class ChannelHub:
    """Wakeup point shared by everything one poller waits on."""

    def __init__(self):
        self.cv = threading.Condition()

    def wake(self):
        with self.cv:
            self.cv.notify_all()


class _ChannelEnd:
    def __init__(self, hub: ChannelHub):
        self.hub = hub
        self.lock = threading.Lock()
        self.segments: deque[bytes] = deque()
        self.eof = False


class ChannelConnection:
    """One side of a bidirectional in-process byte pipe."""

    def __init__(self, local: _ChannelEnd, remote: _ChannelEnd, addr: str):
        self._local = local
        self._remote = remote
        self.addr = addr
        self.closed = False

    def send(self, data: bytes) -> None:
        with self._remote.lock:
            if self._remote.eof:
                raise ProtocolError(f"send on closed channel to {self.addr}")
            self._remote.segments.append(bytes(data))
        self._remote.hub.wake()

    blocking_send = send

    @property
    def wants_write(self) -> bool:
        return False

    def try_flush(self) -> None:
        pass

    def drain(self) -> tuple[list[bytes], bool]:
        """All pending inbound segments plus whether the peer has closed."""
        with self._local.lock:
            if not self._local.segments:
                return [], self._local.eof
            segments = list(self._local.segments)
            self._local.segments.clear()
            return segments, self._local.eof

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        with self._remote.lock:
            self._remote.eof = True
        self._remote.hub.wake()


class ChannelListener:
    def __init__(self, addr: str, hub: ChannelHub):
        self.addr = addr
        self.hub = hub
        self.lock = threading.Lock()
        self.pending: deque[ChannelConnection] = deque()

    def accept_pending(self) -> list[ChannelConnection]:
        with self.lock:
            conns = list(self.pending)
            self.pending.clear()
        return conns


class ChannelNetwork:
    """Registry of in-process listeners, keyed by arbitrary address strings."""

    def __init__(self):
        self._lock = threading.Lock()
        self._listeners: dict[str, ChannelListener] = {}

    def listen(self, addr: str, hub: ChannelHub) -> ChannelListener:
        with self._lock:
            if addr in self._listeners:
                raise InvalidConfigError(f"address already bound: {addr}")
            listener = ChannelListener(addr, hub)
            self._listeners[addr] = listener
            return listener

    def has_listener(self, addr: str) -> bool:
        with self._lock:
            return addr in self._listeners

    def connect(self, addr: str, hub: ChannelHub) -> ChannelConnection:
        with self._lock:
            listener = self._listeners.get(addr)
        if listener is None:
            raise InvalidConfigError(f"no listener at {addr}")
        client_end = _ChannelEnd(hub)
        server_end = _ChannelEnd(listener.hub)
        client_conn = ChannelConnection(client_end, server_end, addr)
        server_conn = ChannelConnection(server_end, client_end, addr)
        with listener.lock:
            listener.pending.append(server_conn)
        listener.hub.wake()
        return client_conn


class ChannelPoller:
    """Event source over channel listeners/connections, registration order."""

    def __init__(self):
        self.hub = ChannelHub()
        self._listeners: list[ChannelListener] = []
        self._conns: list[ChannelConnection] = []
        self._eof_seen: set[int] = set()

    def add_listener(self, listener: ChannelListener) -> None:
        self._listeners.append(listener)

    def add_connection(self, conn: ChannelConnection) -> None:
        self._conns.append(conn)

    def _collect(self) -> list[tuple]:
        events: list[tuple] = []
        for listener in self._listeners:
            for conn in listener.accept_pending():
                self._conns.append(conn)
                events.append(("accept", conn, listener))
        for conn in list(self._conns):
            segments, eof = conn.drain()
            for segment in segments:
                events.append(("data", conn, segment))
            if eof and not segments and id(conn) not in self._eof_seen:
                self._eof_seen.add(id(conn))
                events.append(("eof", conn, None))
        return events

    def poll(self, timeout: float = 0.0) -> list[tuple]:
        events = self._collect()
        if events or timeout <= 0:
            return events
        deadline = time.monotonic() + timeout
        with self.hub.cv:
            remaining = deadline - time.monotonic()
            if remaining > 0:
                self.hub.cv.wait(remaining)
        return self._collect()


# ---------------------------------------------------------------------------
# TCP transport
# ---------------------------------------------------------------------------


class TcpConnection:
    """Nonblocking socket with an internal write buffer."""

    def __init__(self, sock: socket.socket, addr: str):
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.addr = addr
        self.closed = False
        self._out = bytearray()
        self._lock = threading.Lock()

    def send(self, data: bytes) -> None:
        """Queue bytes and flush opportunistically; never blocks."""
        with self._lock:
            self._out.extend(data)
            self._flush_locked()

    def blocking_send(self, data: bytes) -> None:
        """Queue bytes and wait until the kernel accepted everything."""
        with self._lock:
            self._out.extend(data)
            while self._out:
                if not self._flush_locked():
                    selectors_wait = selectors.DefaultSelector()
                    selectors_wait.register(self.sock, selectors.EVENT_WRITE)
                    selectors_wait.select(1.0)
                    selectors_wait.close()

    def _flush_locked(self) -> bool:
        """Try to push buffered bytes out. True if progress was made."""
        progress = False
        while self._out:
            try:
                sent = self.sock.send(self._out)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                raise ProtocolError(f"send failed on {self.addr}: {exc}") from None
            if sent == 0:
                break
            del self._out[:sent]
            progress = True
        return progress

    def try_flush(self) -> None:
        with self._lock:
            self._flush_locked()

    @property
    def wants_write(self) -> bool:
        return bool(self._out)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class TcpListener:
    def __init__(self, addr: str):
        host, port = parse_hostport(addr)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            raise InvalidConfigError(f"cannot bind {addr}: {exc}") from None
        sock.listen(64)
        sock.setblocking(False)
        self.sock = sock
        bound = sock.getsockname()
        self.addr = f"{bound[0]}:{bound[1]}"

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def tcp_connect(addr: str, timeout: float = 10.0) -> TcpConnection:
    """Dial with retries so workers may start before their server."""
    host, port = parse_hostport(addr)
    deadline = time.monotonic() + timeout
    last_err: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=2.0)
            return TcpConnection(sock, addr)
        except OSError as exc:
            last_err = exc
            time.sleep(0.05)
    raise InvalidConfigError(f"cannot connect to {addr}: {last_err}")


class TcpPoller:
    def __init__(self):
        self._sel = selectors.DefaultSelector()
        self._listeners: dict[int, TcpListener] = {}
        self._conns: dict[int, TcpConnection] = {}

    def add_listener(self, listener: TcpListener) -> None:
        self._listeners[listener.sock.fileno()] = listener
        self._sel.register(listener.sock, selectors.EVENT_READ, ("listener", listener))

    def add_connection(self, conn: TcpConnection) -> None:
        self._conns[conn.sock.fileno()] = conn
        self._sel.register(conn.sock, selectors.EVENT_READ, ("conn", conn))

    def _remove(self, conn: TcpConnection) -> None:
        self._conns.pop(conn.sock.fileno(), None)
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass

    def poll(self, timeout: float = 0.0) -> list[tuple]:
        for conn in self._conns.values():
            mask = selectors.EVENT_READ
            if conn.wants_write:
                mask |= selectors.EVENT_WRITE
            self._sel.modify(conn.sock, mask, ("conn", conn))
        events: list[tuple] = []
        for key, mask in self._sel.select(timeout):
            kind, obj = key.data
            if kind == "listener":
                while True:
                    try:
                        raw, peer = obj.sock.accept()
                    except (BlockingIOError, InterruptedError):
                        break
                    except OSError:
                        break
                    conn = TcpConnection(raw, f"{peer[0]}:{peer[1]}")
                    self.add_connection(conn)
                    events.append(("accept", conn, obj))
                continue
            conn = obj
            if mask & selectors.EVENT_WRITE:
                conn.try_flush()
            if mask & selectors.EVENT_READ:
                try:
                    data = conn.sock.recv(_RECV_SIZE)
                except (BlockingIOError, InterruptedError):
                    continue
                except OSError:
                    data = b""
                if data:
                    events.append(("data", conn, data))
                else:
                    self._remove(conn)
                    events.append(("eof", conn, None))
        return events

    def close(self) -> None:
        self._sel.close()
