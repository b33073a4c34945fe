"""Wall-clock runtime: real sockets behind the emulated host interface.

The node and session layers touch their environment through four calls:
timer scheduling on the engine, ``bind_udp``, ``listen_stream`` and
``connect_stream`` on the host. This module provides drop-in versions of
those backed by the machine clock and kernel sockets, so the same role
runtimes that run deterministically inside the emulator can serve live
traffic. Live mode is excluded from golden-trace tests by nature: the
kernel schedules, so byte-identical reruns are not expected.
"""

from __future__ import annotations

import errno
import heapq
import itertools
import selectors
import socket
import time
from typing import Callable

from .emulator import Timer

Address = tuple[str, int]

_MAX_IDLE_S = 0.25
_RECV_SIZE = 65536


class LiveEngine:
    """Timer and socket loop on the real clock.

    Mirrors the event-engine scheduling interface; ``now_us`` is epoch
    microseconds so protocol timestamps agree across processes sharing a
    clock.
    """

    def __init__(self):
        self._sel = selectors.DefaultSelector()
        self._heap: list[tuple[int, int, Timer]] = []
        self._seq = itertools.count()
        self._stopped = False
        self._read_mask = selectors.EVENT_READ
        self._write_mask = selectors.EVENT_WRITE
        # fileobj -> [read_cb, write_cb]
        self._io: dict[object, list] = {}

    @property
    def now_us(self) -> int:
        return time.time_ns() // 1000

    def now_ms(self) -> int:
        return self.now_us // 1000

    # scheduling

    def at(self, at_us: int, fn: Callable[[], None]) -> Timer:
        timer = Timer(fn)
        heapq.heappush(self._heap, (max(at_us, self.now_us), next(self._seq), timer))
        return timer

    def after_us(self, delay_us: int, fn: Callable[[], None]) -> Timer:
        return self.at(self.now_us + max(0, delay_us), fn)

    def after_ms(self, delay_ms: float, fn: Callable[[], None]) -> Timer:
        return self.after_us(int(round(delay_ms * 1000)), fn)

    def call_soon(self, fn: Callable[[], None]) -> Timer:
        return self.after_us(0, fn)

    # socket interest

    def set_io(self, fileobj, read_cb=None, write_cb=None) -> None:
        """Register or update callbacks; None for both removes the entry."""
        if read_cb is None and write_cb is None:
            if fileobj in self._io:
                del self._io[fileobj]
                self._sel.unregister(fileobj)
            return
        mask = (self._read_mask if read_cb else 0) | (
            self._write_mask if write_cb else 0)
        if fileobj in self._io:
            self._io[fileobj][:] = [read_cb, write_cb]
            self._sel.modify(fileobj, mask)
        else:
            self._io[fileobj] = [read_cb, write_cb]
            self._sel.register(fileobj, mask)

    # loop

    def stop(self) -> None:
        self._stopped = True

    def _fire_due(self) -> None:
        now = self.now_us
        while self._heap and self._heap[0][0] <= now:
            _, _, timer = heapq.heappop(self._heap)
            if not timer.cancelled:
                timer.fn()

    def run(self) -> None:
        self._stopped = False
        while not self._stopped:
            self.poll(_MAX_IDLE_S)

    def poll(self, max_wait_s: float = 0.0) -> None:
        """One loop turn: wait for I/O or the next timer, then dispatch."""
        timeout = max_wait_s
        if self._heap:
            next_due = (self._heap[0][0] - self.now_us) / 1e6
            timeout = max(0.0, min(timeout, next_due))
        for key, mask in self._sel.select(timeout):
            cbs = self._io.get(key.fileobj)
            if cbs is None:
                continue
            if mask & self._read_mask and cbs[0] is not None:
                cbs[0]()
            if mask & self._write_mask and cbs[1] is not None:
                cbs[1]()
        self._fire_due()

    def close(self) -> None:
        self._sel.close()


class LiveUdpSocket:
    def __init__(self, engine: LiveEngine, sock: socket.socket, handler):
        self.engine = engine
        self.sock = sock
        self.port = sock.getsockname()[1]
        self.handler = handler
        engine.set_io(sock, read_cb=self._readable)

    def _readable(self) -> None:
        while True:
            try:
                data, src = self.sock.recvfrom(_RECV_SIZE)
            except BlockingIOError:
                return
            except OSError:
                return
            if self.handler is not None:
                self.handler(data, src, None)

    def sendto(self, data: bytes, dst: Address, meta: dict | None = None) -> None:
        try:
            self.sock.sendto(data, dst)
        except OSError:
            pass  # unreachable peer: UDP semantics, silently dropped

    def close(self) -> None:
        self.engine.set_io(self.sock)
        self.sock.close()


class LiveStreamConn:
    """TCP connection presenting the emulated stream surface."""

    def __init__(self, engine: LiveEngine, sock: socket.socket, peer: Address,
                 connecting: bool, on_open=None, on_data=None, on_close=None):
        self.engine = engine
        self.sock = sock
        self.peer = peer
        self.on_open = on_open
        self.on_data = on_data
        self.on_close = on_close
        self.state = "connecting" if connecting else "open"
        self._outbuf = b""
        self._fin_queued = False
        if connecting:
            engine.set_io(sock, write_cb=self._connected)
        else:
            engine.set_io(sock, read_cb=self._readable)

    # connect completion

    def _connected(self) -> None:
        err = self.sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
        if err:
            self._teardown("closed")
            return
        self.state = "open"
        self._update_io()
        if self.on_open is not None:
            self.on_open(self)
        self._flush()

    # outbound

    def send(self, data: bytes) -> None:
        if self.state == "closed":
            raise ValueError("stream is closed")
        self._outbuf += data
        if self.state == "open":
            self._flush()

    def close(self) -> None:
        if self.state == "closed":
            return
        if self.state == "connecting" or not self._outbuf:
            self._teardown("closed")
            return
        self._fin_queued = True  # drain first

    def _flush(self) -> None:
        while self._outbuf:
            try:
                n = self.sock.send(self._outbuf)
            except BlockingIOError:
                break
            except OSError:
                self._teardown("closed")
                return
            self._outbuf = self._outbuf[n:]
        if not self._outbuf and self._fin_queued:
            self._teardown("closed")
            return
        self._update_io()

    def _update_io(self) -> None:
        if self.state == "closed":
            return
        self.engine.set_io(
            self.sock, read_cb=self._readable,
            write_cb=self._writable if self._outbuf else None)

    def _writable(self) -> None:
        self._flush()

    # inbound

    def _readable(self) -> None:
        while True:
            try:
                data = self.sock.recv(_RECV_SIZE)
            except BlockingIOError:
                return
            except OSError:
                self._teardown("closed")
                return
            if not data:
                self._teardown("fin")
                return
            if self.on_data is not None:
                self.on_data(data)
            if self.state == "closed":
                return

    def _teardown(self, reason: str = "closed") -> None:
        if self.state == "closed":
            return
        self.state = "closed"
        self.engine.set_io(self.sock)
        try:
            self.sock.close()
        except OSError:
            pass
        if self.on_close is not None:
            self.on_close(self, reason)


class LiveListener:
    def __init__(self, engine: LiveEngine, sock: socket.socket, on_accept):
        self.engine = engine
        self.sock = sock
        self.port = sock.getsockname()[1]
        self.on_accept = on_accept
        engine.set_io(sock, read_cb=self._acceptable)

    def _acceptable(self) -> None:
        while True:
            try:
                client, addr = self.sock.accept()
            except BlockingIOError:
                return
            except OSError:
                return
            client.setblocking(False)
            client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = LiveStreamConn(self.engine, client, addr, connecting=False)
            self.on_accept(conn)

    def close(self) -> None:
        self.engine.set_io(self.sock)
        self.sock.close()


class LiveHost:
    """Kernel-socket host bound to one local address."""

    def __init__(self, engine: LiveEngine, ip: str):
        self.engine = engine
        self.ip = ip

    def now_ms(self) -> int:
        return self.engine.now_ms()

    def bind_udp(self, port: int, handler) -> LiveUdpSocket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setblocking(False)
        try:
            sock.bind((self.ip, port))
        except OSError as exc:
            sock.close()
            raise OSError(
                errno.EADDRNOTAVAIL,
                f"cannot bind {self.ip}:{port}: {exc.strerror}; single-machine "
                f"runs need a mission generated with loopback addresses",
            ) from exc
        return LiveUdpSocket(self.engine, sock, handler)

    def listen_stream(self, port: int, on_accept) -> LiveListener:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.setblocking(False)
        sock.bind((self.ip, port))
        sock.listen(16)
        return LiveListener(self.engine, sock, on_accept)

    def connect_stream(self, dst: Address, on_open=None, on_data=None,
                       on_close=None) -> LiveStreamConn:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            sock.bind((self.ip, 0))
        except OSError:
            pass  # source picked by routing when the address is not local
        rc = sock.connect_ex(dst)
        conn = LiveStreamConn(self.engine, sock, dst, connecting=True,
                              on_open=on_open, on_data=on_data,
                              on_close=on_close)
        if rc not in (0, errno.EINPROGRESS, errno.EWOULDBLOCK):
            self.engine.call_soon(lambda: conn._teardown("closed"))
        return conn
