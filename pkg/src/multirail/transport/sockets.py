"""Stream-socket channels with optional rail shaping."""
from __future__ import annotations

import queue
import socket
import threading
import time

from .channel import FAREWELL, Channel, SendHandle
from .frame import HEADER_SIZE, ChannelDown, Frame, MsgType, ProtocolError, decode_header
from .shaping import Shaper

_STOP = object()


def _recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError("peer closed")
        got += k
    return buf


class SocketChannel(Channel):
    """Channel over one connected stream socket.

    A sender thread drains the per-channel send queue (so ``send`` never
    blocks) and a reader thread decodes frames into the typed inboxes. With a
    shaper attached, the sender paces frames through the rail's token bucket
    and the reader holds each frame back by the rail's setup latency.
    """

    def __init__(self, rank, peer_rank, rail_id, sock: socket.socket, shaper: Shaper | None = None,
                 link_id: str | None = None):
        try:
            name = "%s:%d" % sock.getsockname()[:2]
        except OSError:
            name = "closed"
        super().__init__(rank, peer_rank, rail_id, link_id or name)
        self.sock = sock
        self.shaper = shaper
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._closing = False
        self._last: SendHandle | None = None
        self._sender = threading.Thread(target=self._send_loop, daemon=True,
                                        name=f"tx r{rank}->{peer_rank} rail{rail_id}")
        self._reader = threading.Thread(target=self._recv_loop, daemon=True,
                                        name=f"rx r{rank}<-{peer_rank} rail{rail_id}")
        self._sender.start()
        self._reader.start()

    def send(self, frame: Frame) -> SendHandle:
        handle = SendHandle(frame.length)
        if self._down is not None:
            handle._finish(self._down)
            return handle
        self._queue.put((frame, handle))
        self._last = handle
        return handle

    def flush(self, timeout: float | None = None) -> bool:
        last = self._last
        try:
            return last is None or last.wait(timeout)
        except ChannelDown:
            return False

    def _send_loop(self):
        while True:
            item = self._queue.get()
            if item is _STOP:
                break
            frame, handle = item
            if self._down is not None:
                handle._finish(self._down)
                continue
            try:
                if self.shaper is not None:
                    self.shaper.pace(HEADER_SIZE + frame.length)
                self.sock.sendall(frame.header())
                if frame.length:
                    self.sock.sendall(frame.payload)
            except OSError as exc:
                self._mark_down(f"send failed: {exc}")
                handle._finish(self._down)
                continue
            self._count_sent(frame)
            handle._finish()
        # fail whatever is still queued
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                break
            if item is not _STOP:
                item[1]._finish(self._down or ChannelDown("closed"))

    def _recv_loop(self):
        try:
            while True:
                header = _recv_exact(self.sock, HEADER_SIZE)
                mtype, op_seq, chunk, offset, length = decode_header(header)
                payload = _recv_exact(self.sock, length) if length else b""
                release = 0.0
                if self.shaper is not None:
                    d = self.shaper.delay(length)
                    if d > 0:
                        release = time.perf_counter() + d
                self._deliver(Frame(mtype, op_seq, chunk, offset, payload), release)
        except ProtocolError as exc:
            self._mark_down(f"protocol error: {exc}")
            self._abort_socket()
        except (OSError, ConnectionError, ValueError) as exc:
            self._mark_down("peer closed" if not self._closing else "closed locally")
        finally:
            self._queue.put(_STOP)

    def finish_sending(self) -> bool:
        # a full close with unread input would reset the connection and
        # could discard frames the peer has not read yet
        self.send(Frame(MsgType.HEALTH, 0, FAREWELL, 0))
        self.flush(1.0)
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            return False
        return True

    def _abort_socket(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def close(self) -> None:
        """Abrupt close: the peer sees EOF/reset and marks its end down."""
        self._closing = True
        self._mark_down("closed locally")
        self._abort_socket()
        self._queue.put(_STOP)
