"""Rail health tracking and handoff of orphaned segments to a surviving rail."""
from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .core import Segment
from .transport.frame import Frame, MsgType
from .transport.rendezvous import ConnectionSet


class Health(Enum):
    HEALTHY = "healthy"
    SUSPECT = "suspect"
    FAILED = "failed"


class UnrecoverableFailure(RuntimeError):
    """No surviving rail can take over the orphaned work."""


class ReadmitRejected(RuntimeError):
    pass


@dataclass
class HealthState:
    rail_id: int
    status: Health = Health.HEALTHY
    last_heartbeat: float = field(default_factory=time.monotonic)
    failure_epoch: int = 0
    failed_at: float | None = None          # perf_counter of the Failed transition
    restored_at: float | None = None        # fresh channels installed after a failure


@dataclass
class Transition:
    at: float
    rail_id: int
    old: Health
    new: Health
    reason: str = ""


@dataclass
class HandoffTicket:
    op_seq: int
    segment: Segment                # orphaned byte range
    source_rail: int
    target_rail: int
    issued_at: float = field(default_factory=time.perf_counter)
    failed_at: float | None = None
    resumed_at: float | None = None
    completed_at: float | None = None

    @property
    def resume_delay(self) -> float | None:
        """Seconds from the Failed transition to the orphan starting on the target."""
        if self.resumed_at is None:
            return None
        start = self.failed_at if self.failed_at is not None else self.issued_at
        return self.resumed_at - start


def select_target(data_length: Mapping[int, int], failed: Iterable[int],
                  rail_ids: Sequence[int]) -> int:
    """Surviving rail with the largest current allocation; ties go to the lowest id."""
    dead = set(failed)
    alive = [r for r in rail_ids if r not in dead]
    if not alive:
        raise UnrecoverableFailure("no surviving rail")
    return min(alive, key=lambda r: (-data_length.get(r, 0), r))


def orphaned_range(chunks: Sequence[Segment], completed: int) -> Segment | None:
    """Bytes still to be reduced once ``completed`` leading chunks are final everywhere."""
    if completed >= len(chunks):
        return None
    start = chunks[completed].offset
    return Segment(start, chunks[-1].end - start)


class HealthMonitor:
    """Heartbeats on every channel plus channel-down notifications, folded per rail.

    A rail is Suspect after ``suspect_misses`` heartbeat intervals without
    hearing from some peer, Failed after ``fail_misses`` or as soon as one
    of its channels goes down. Failed is sticky: the rail's remaining
    channels are closed (so peers notice immediately) and only
    :meth:`readmit` brings it back.
    """

    def __init__(self, conns: ConnectionSet, interval: float | None = 0.05, suspect_misses: int = 2,
                 fail_misses: int = 3, readmit_after: float = 1.0,
                 on_failed: Callable[[int, str], None] | None = None):
        self.conns = conns
        self.interval = interval
        self.suspect_misses = suspect_misses
        self.fail_misses = fail_misses
        self.readmit_after = readmit_after
        self.on_failed = on_failed
        self.rails = {r: HealthState(r) for r in conns.rail_ids}
        self.transitions: list[Transition] = []
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._paused_until = 0.0
        self._thread: threading.Thread | None = None
        for (rail, _peer), ch in conns.channels.items():
            self._watch(rail, ch)

    def _watch(self, rail, ch):
        ch.on_down(lambda c, rail=rail: self._channel_down(rail, c))

    # -- lifecycle --

    def start(self) -> "HealthMonitor":
        if self.interval and self._thread is None:
            self._thread = threading.Thread(target=self._loop, daemon=True,
                                            name=f"health r{self.conns.rank}")
            self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=1.0)
            self._thread = None

    def pause_heartbeats(self, duration: float) -> None:
        """Stop sending heartbeats for ``duration`` seconds (stall emulation)."""
        self._paused_until = time.monotonic() + duration

    # -- queries --

    def status(self, rail_id: int) -> Health:
        return self.rails[rail_id].status

    def failed(self) -> set[int]:
        return {r for r, s in self.rails.items() if s.status is Health.FAILED}

    def healthy(self) -> list[int]:
        return [r for r, s in self.rails.items() if s.status is not Health.FAILED]

    # -- transitions --

    def _set(self, rail_id: int, new: Health, reason: str = "") -> None:
        st = self.rails[rail_id]
        if st.status is new:
            return
        self.transitions.append(Transition(time.perf_counter(), rail_id, st.status, new, reason))
        st.status = new

    def fail(self, rail_id: int, reason: str = "") -> bool:
        """Mark a rail Failed; returns True on the first transition."""
        with self._lock:
            st = self.rails[rail_id]
            if st.status is Health.FAILED:
                return False
            if st.status is Health.HEALTHY:
                self._set(rail_id, Health.SUSPECT, reason)
            self._set(rail_id, Health.FAILED, reason)
            st.failed_at = time.perf_counter()
            st.failure_epoch += 1
            st.restored_at = None
        # deregister: close the rest of the rail so the failure propagates
        self.conns.fail_rail(rail_id)
        if self.on_failed is not None:
            self.on_failed(rail_id, reason)
        return True

    def _channel_down(self, rail_id, ch):
        if self._stop.is_set() or ch.peer_finished:
            return  # shutting down, or the peer hung up after the final barrier
        if self.conns.channels.get((rail_id, ch.peer_rank)) is ch:
            self.fail(rail_id, f"channel to {ch.peer_rank} down")

    def _misses(self, rail_id: int, now: float) -> int:
        chans = [ch for ch in self.conns.rail(rail_id).values() if not ch.peer_finished]
        if not chans or not self.interval:
            return 0
        oldest = min(ch.last_heard for ch in chans)
        return int((now - oldest) / self.interval)

    def check(self, now: float | None = None) -> None:
        now = time.monotonic() if now is None else now
        for rail_id, st in self.rails.items():
            misses = self._misses(rail_id, now)
            with self._lock:
                if st.status is Health.FAILED:
                    continue
                if misses >= self.fail_misses:
                    pass
                elif misses >= self.suspect_misses:
                    self._set(rail_id, Health.SUSPECT, f"{misses} missed heartbeats")
                    continue
                else:
                    if st.status is Health.SUSPECT:
                        self._set(rail_id, Health.HEALTHY, "heartbeats resumed")
                    st.last_heartbeat = now
                    continue
            self.fail(rail_id, f"{misses} missed heartbeats")

    def _beat(self) -> None:
        if time.monotonic() < self._paused_until:
            return
        hb = Frame(MsgType.HEALTH, 0, 0, 0)
        for (rail_id, _), ch in list(self.conns.channels.items()):
            if not ch.is_down:
                ch.send(hb)

    def _loop(self):
        tick = self.interval / 5
        next_beat = 0.0
        while not self._stop.wait(tick):
            now = time.monotonic()
            if now >= next_beat:
                self._beat()
                next_beat = now + self.interval
            self.check(now)

    # -- recovery --

    def restore(self, rail_id: int, channels: Mapping[int, object]) -> None:
        """Install fresh channels for a failed rail; it stays Failed until readmitted."""
        with self._lock:
            self.conns.replace_rail(rail_id, dict(channels))
            for ch in channels.values():
                ch.last_heard = time.monotonic()
                self._watch(rail_id, ch)
            self.rails[rail_id].restored_at = time.monotonic()

    def can_readmit(self, rail_id: int, now: float | None = None) -> bool:
        if rail_id not in self.rails:
            raise ReadmitRejected(f"unknown rail {rail_id}")
        st = self.rails[rail_id]
        now = time.monotonic() if now is None else now
        if st.status is not Health.FAILED:
            return False
        chans = self.conns.rail(rail_id).values()
        if st.restored_at is None or any(ch.is_down for ch in chans):
            return False
        if now - st.restored_at < self.readmit_after:
            return False
        return self._misses(rail_id, now) < self.suspect_misses

    def readmit(self, rail_id: int) -> None:
        if rail_id not in self.rails:
            raise ReadmitRejected(f"unknown rail {rail_id}")
        st = self.rails[rail_id]
        if st.status is not Health.FAILED:
            raise ReadmitRejected(f"rail {rail_id} is {st.status.value}, not failed")
        if not self.can_readmit(rail_id):
            raise ReadmitRejected(f"rail {rail_id} has not been healthy for {self.readmit_after}s")
        with self._lock:
            self._set(rail_id, Health.HEALTHY, "readmitted")
            st.failed_at = None


def monitor(conns: ConnectionSet, **kw) -> HealthMonitor:
    """Start a health monitor over ``conns``; transitions accumulate in ``.transitions``."""
    return HealthMonitor(conns, **kw).start()


# Status record exchanged at the end of every operation: which rails this
# rank considers failed, and for each segment of the operation (in offset
# order) how many of its chunks this rank finished.
_STATUS_HEAD = struct.Struct("<II")
_STATUS_ITEM = struct.Struct("<II")


def pack_status(failed: Iterable[int], progress: Sequence[tuple[int, int]]) -> bytes:
    mask = 0
    for r in failed:
        mask |= 1 << r
    out = [_STATUS_HEAD.pack(mask, len(progress))]
    for done, total in progress:
        out.append(_STATUS_ITEM.pack(done, total))
    return b"".join(out)


def unpack_status(buf: bytes) -> tuple[set[int], list[tuple[int, int]]]:
    mask, n = _STATUS_HEAD.unpack_from(buf)
    failed = {i for i in range(32) if mask >> i & 1}
    progress = [_STATUS_ITEM.unpack_from(buf, _STATUS_HEAD.size + k * _STATUS_ITEM.size) for k in range(n)]
    return failed, progress
