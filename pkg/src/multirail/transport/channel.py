"""Channel abstraction plus the in-memory transport used by deterministic tests."""
from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from typing import Callable

from .frame import ChannelDown, Frame, HEADER_SIZE, MsgType
from .shaping import sleep_until


# chunk_index of the last heartbeat a rank sends before it hangs up
FAREWELL = 0xFFFFFFFF


class SendHandle:
    """Completion handle for one queued frame."""

    __slots__ = ("_event", "error", "nbytes")

    def __init__(self, nbytes: int = 0):
        self._event = threading.Event()
        self.error: BaseException | None = None
        self.nbytes = nbytes

    def _finish(self, error: BaseException | None = None):
        self.error = error
        self._event.set()

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        if not self._event.wait(timeout):
            return False
        if self.error is not None:
            raise self.error
        return True


def wait_all(handles, timeout: float | None = None) -> None:
    deadline = None if timeout is None else time.perf_counter() + timeout
    for h in handles:
        left = None if deadline is None else max(0.0, deadline - time.perf_counter())
        if not h.wait(left):
            raise TimeoutError("send completion timed out")


class Channel:
    """One ordered, bidirectional stream between this rank and ``peer_rank`` on one rail.

    Incoming frames are demultiplexed by message type so the collective
    (DATA), the control path (ACK/HANDOFF) and the health monitor (HEALTH)
    can each consume their own traffic without stealing each other's.
    """

    def __init__(self, rank: int, peer_rank: int, rail_id: int, physical_link_id: str):
        self.rank = rank
        self.peer_rank = peer_rank
        self.rail_id = rail_id
        self.physical_link_id = physical_link_id
        self._cond = threading.Condition()
        self._inbox: dict[MsgType, deque] = {t: deque() for t in MsgType}
        self._down: ChannelDown | None = None
        self._down_callbacks: list[Callable[["Channel"], None]] = []
        self._sinks: dict[MsgType, Callable[["Channel", Frame], None]] = {}
        self.last_heard = time.monotonic()
        self.frames_sent = 0
        self.bytes_sent = 0
        self.payload_bytes_sent = 0
        self.frames_received = 0
        self.bytes_received = 0
        self.peer_finished = False      # peer said goodbye; its end-of-stream is not a failure

    def __repr__(self):
        return f"<{type(self).__name__} rank={self.rank} peer={self.peer_rank} rail={self.rail_id}>"

    @property
    def is_down(self) -> bool:
        return self._down is not None

    def on_down(self, callback: Callable[["Channel"], None]) -> None:
        fire = False
        with self._cond:
            if self._down is None:
                self._down_callbacks.append(callback)
            else:
                fire = True
        if fire:
            callback(self)

    def _count_sent(self, frame: Frame):
        self.frames_sent += 1
        self.bytes_sent += HEADER_SIZE + frame.length
        if frame.msg_type == MsgType.DATA:
            self.payload_bytes_sent += frame.length

    def set_sink(self, msg_types, callback: Callable[["Channel", Frame], None]) -> None:
        """Route frames of ``msg_types`` to ``callback`` instead of the inbox."""
        pending = []
        with self._cond:
            for t in msg_types:
                t = MsgType(t)
                self._sinks[t] = callback
                # frames that beat the sink into the inbox
                while self._inbox[t]:
                    pending.append(self._inbox[t].popleft()[1])
        for frame in pending:
            callback(self, frame)

    def _deliver(self, frame: Frame, release_at: float = 0.0) -> None:
        with self._cond:
            sink = self._sinks.get(frame.msg_type)
            self.last_heard = time.monotonic()
            self.frames_received += 1
            self.bytes_received += HEADER_SIZE + frame.length
            if frame.msg_type == MsgType.HEALTH:
                if frame.chunk_index == FAREWELL:
                    self.peer_finished = True
                return
            if sink is None:
                self._inbox[frame.msg_type].append((release_at, frame))
                self._cond.notify_all()
                return
        sink(self, frame)

    def _mark_down(self, reason: str = "channel down") -> None:
        with self._cond:
            if self._down is not None:
                return
            self._down = ChannelDown(f"{reason} (rank {self.rank} <-> {self.peer_rank}, rail {self.rail_id})",
                                     self.rail_id, self.peer_rank)
            callbacks, self._down_callbacks = self._down_callbacks, []
            self._cond.notify_all()
        for cb in callbacks:
            try:
                cb(self)
            except Exception:  # callbacks must never break the transport
                pass

    def recv(self, msg_type: MsgType = MsgType.DATA, timeout: float | None = None) -> Frame:
        """Next frame of ``msg_type`` in FIFO order.

        Frames that arrived before the channel went down are still handed
        out; afterwards :class:`ChannelDown` is raised.
        """
        q = self._inbox[msg_type]
        with self._cond:
            ok = self._cond.wait_for(lambda: q or self._down is not None, timeout)
            if not ok:
                raise TimeoutError(f"recv timed out on {self!r}")
            if not q:
                raise self._down
            release_at, frame = q.popleft()
        if release_at:
            sleep_until(release_at)
        return frame

    def poll(self, msg_type: MsgType) -> Frame | None:
        """Non-blocking receive (ignores shaping delay)."""
        with self._cond:
            q = self._inbox[msg_type]
            if q:
                return q.popleft()[1]
        return None

    def send(self, frame: Frame) -> SendHandle:
        raise NotImplementedError

    def flush(self, timeout: float | None = None) -> bool:
        """Wait until every frame sent so far has left this end."""
        return True

    def finish_sending(self) -> bool:
        """Half-close: no more frames from this end, keep reading until the peer stops.

        Returns True when the peer's end-of-stream is worth waiting for.
        """
        return False

    def wait_down(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._down is not None, timeout)

    def close(self) -> None:
        self._mark_down("closed locally")


class InMemoryLink:
    """A shared in-process link; any number of channel pairs may ride on it."""

    _ids = itertools.count()

    def __init__(self, name: str | None = None):
        self.link_id = name or f"mem{next(self._ids)}"
        self.frames = 0
        self._lock = threading.Lock()

    def tick(self):
        with self._lock:
            self.frames += 1


class InMemoryChannel(Channel):
    """Zero-delay channel; delivery happens synchronously inside :meth:`send`."""

    def __init__(self, rank, peer_rank, rail_id, link: InMemoryLink):
        super().__init__(rank, peer_rank, rail_id, link.link_id)
        self.link = link
        self.peer: InMemoryChannel | None = None
        self._close_at: int | None = None
        self._send_lock = threading.Lock()

    @staticmethod
    def pair(rank_a, rank_b, rail_id, link: InMemoryLink | None = None):
        link = link or InMemoryLink()
        a = InMemoryChannel(rank_a, rank_b, rail_id, link)
        b = InMemoryChannel(rank_b, rank_a, rail_id, link)
        a.peer, b.peer = b, a
        return a, b

    def inject_close(self, at_frame: int) -> None:
        """Close this channel (both ends) when its ``at_frame``-th frame is sent (1-based)."""
        if at_frame < 1:
            raise ValueError("at_frame is 1-based")
        self._close_at = at_frame

    def send(self, frame: Frame) -> SendHandle:
        handle = SendHandle(frame.length)
        with self._send_lock:
            if self._down is not None:
                handle._finish(self._down)
                return handle
            nth = self.frames_sent + 1
            if self._close_at is not None and nth >= self._close_at:
                self.frames_sent = nth
                self.close()
                handle._finish(self._down)
                return handle
            self._count_sent(frame)
            self.link.tick()
            payload = frame.payload
            if not isinstance(payload, bytes):
                frame = Frame(frame.msg_type, frame.op_seq, frame.chunk_index, frame.offset, bytes(payload))
            self.peer._deliver(frame)
        handle._finish()
        return handle

    def close(self) -> None:
        self._mark_down("closed")
        if self.peer is not None:
            self.peer._mark_down("peer closed")
