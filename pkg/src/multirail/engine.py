"""Per-rank multi-rail allreduce: allocation, per-rail executors, agreement and handoff."""
from __future__ import annotations

import logging
import queue
import struct
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .balancer import Balancer, BalancerConfig, BucketState, ComputePool, FlushEvent, Phase
from .collective import (Algorithm, OpHandle, OperationAborted, UnboundBuffer, allreduce_segment,
                         chunk_bounds, default_chunk_size, split_oversized)
from .core import DTYPE, InvalidArgument, Segment, as_tensor, split_even
from .faults import (HandoffTicket, Health, HealthMonitor, ReadmitRejected, UnrecoverableFailure,
                     orphaned_range, pack_status, select_target, unpack_status)
from .transport.frame import ChannelDown, Frame, MsgType
from .transport.rendezvous import ConnectionSet

log = logging.getLogger(__name__)

# op_seq namespaces: user operations count up from 1; orphan re-runs and
# control exchanges set high bits so they never collide on a channel.
HANDOFF_BIT = 0x80000000
CONTROL_BIT = 0x40000000
SEQ_MASK = 0x3FFFFFFF


@dataclass
class ContextConfig:
    algorithm: Algorithm = Algorithm.RING
    chunk_size: int | None = None
    heartbeat_interval: float | None = 0.05
    readmit_after: float = 1.0
    recv_timeout: float | None = 120.0
    control_timeout: float = 60.0
    measure_sync: bool = True
    sync_probe_rounds: int = 5
    # optional virtual clock: fn(allocation, payload) -> (per-rail µs, op µs)
    # replacing wall-clock timings, for reproducible runs
    latency_model: Callable | None = None


@dataclass
class OpRecord:
    op_seq: int
    payload: int
    allocation: list
    latency_us: float
    rail_latency_us: dict
    tickets: list = field(default_factory=list)
    flushed: bool = False


class RailExecutor:
    """Single worker thread per rail; tasks (segments and handoffs) run in submission order."""

    def __init__(self, rail_id: int, name: str = ""):
        self.rail_id = rail_id
        self._q: queue.SimpleQueue = queue.SimpleQueue()
        self._thread = threading.Thread(target=self._loop, daemon=True, name=name or f"rail{rail_id}")
        self._thread.start()

    def submit(self, fn: Callable, *args) -> Future:
        fut: Future = Future()
        self._q.put((fut, fn, args))
        return fut

    def _loop(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            fut, fn, args = item
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                fut.set_result(fn(*args))
            except BaseException as exc:  # handed to the caller through the future
                fut.set_exception(exc)

    def shutdown(self):
        self._q.put(None)


class MultiRailContext:
    """One rank's view of a multi-rail communicator.

    ``allreduce`` sums a float32 tensor across all ranks in place. The
    balancer splits it into per-rail segments, each rail's executor runs a
    ring over its segment, and every operation ends with a short status
    exchange carried redundantly on all healthy rails so that all ranks
    agree on which chunks finished and which rails died. Unfinished chunks
    are re-run on the surviving rail with the largest share.
    """

    def __init__(self, conns: ConnectionSet, balancer: Balancer | None = None,
                 config: ContextConfig | None = None, pool: ComputePool | None = None, policy=None):
        self.conns = conns
        self.rank = conns.rank
        self.world_size = conns.world_size
        self.profiles = {p.rail_id: p for p in conns.rails}
        self.rail_ids = conns.rail_ids
        self.config = config or ContextConfig()
        self.balancer = balancer or Balancer.for_ring(conns.rails, self.world_size, BalancerConfig())
        self.pool = pool
        # anything with allocate(payload); only the balancer learns from telemetry
        self.policy = policy or self.balancer
        self.op_seq = 0
        self._ctl_seq = 0
        self.agreed_failed: set[int] = set()
        self.history: list[OpRecord] = []
        self.tickets: list[HandoffTicket] = []
        self._mail: dict[tuple[int, int], bytes] = {}
        self._mail_cond = threading.Condition()
        self._retired = 0
        self.executors = {r: RailExecutor(r, f"exec r{self.rank} rail{r}") for r in self.rail_ids}
        self.monitor = HealthMonitor(conns, self.config.heartbeat_interval,
                                     readmit_after=self.config.readmit_after)
        for ch in conns.ordered():
            self._install_sink(ch)
        self.monitor.start()
        self._closed = False
        if self.config.measure_sync and len(self.rail_ids) > 1 and self.balancer.config.sync_overhead is None:
            self.measure_sync_overhead()

    # ------------------------------------------------------------------ control

    def _install_sink(self, ch):
        ch.set_sink((MsgType.ACK, MsgType.HANDOFF), self._on_control)

    def _on_control(self, ch, frame: Frame):
        with self._mail_cond:
            key = (frame.op_seq, ch.peer_rank)
            if (frame.op_seq & SEQ_MASK) <= self._retired:
                return  # late duplicate of a finished exchange
            if key not in self._mail:
                self._mail[key] = bytes(frame.payload)
                self._mail_cond.notify_all()

    def _carriers(self) -> list[int]:
        return [r for r in self.rail_ids if r not in self.agreed_failed
                and self.monitor.status(r) is not Health.FAILED]

    def exchange(self, op_seq: int, payload: bytes, msg_type: MsgType = MsgType.ACK) -> dict[int, bytes]:
        """Send ``payload`` to every peer on every healthy rail; collect one copy from each peer.

        Redundant carriage means a single rail failure cannot lose a record.
        """
        frame = Frame(msg_type, op_seq, 0, 0, payload)
        peers = [p for p in range(self.world_size) if p != self.rank]
        for r in self._carriers():
            for p in peers:
                ch = self.conns.channels.get((r, p))
                if ch is not None and not ch.is_down:
                    ch.send(frame)
        deadline = time.monotonic() + self.config.control_timeout
        got: dict[int, bytes] = {self.rank: payload}
        with self._mail_cond:
            while True:
                for p in peers:
                    if p not in got and (op_seq, p) in self._mail:
                        got[p] = self._mail.pop((op_seq, p))
                if len(got) == self.world_size:
                    self._retired = op_seq & SEQ_MASK
                    return got
                if not self._carriers():
                    raise UnrecoverableFailure("no rail left to carry control traffic")
                left = deadline - time.monotonic()
                if left <= 0:
                    missing = [p for p in peers if p not in got]
                    raise UnrecoverableFailure(f"status exchange {op_seq:#x} timed out waiting for {missing}")
                self._mail_cond.wait(min(left, 0.05))

    def _control_seq(self) -> int:
        self._ctl_seq += 1
        return CONTROL_BIT | (self._ctl_seq & SEQ_MASK)

    def agree_mean(self, values: Sequence[float]) -> np.ndarray:
        """Element-wise mean across ranks, identical bits on every rank."""
        vec = np.asarray(values, dtype=np.float64)
        got = self.exchange(self._control_seq(), vec.tobytes())
        rows = [np.frombuffer(got[r], dtype=np.float64) for r in range(self.world_size)]
        total = np.zeros_like(vec)
        for row in rows:
            total = total + row
        return total / self.world_size

    def barrier(self) -> None:
        self.exchange(self._control_seq(), b"")

    # ------------------------------------------------------------------ startup

    def measure_sync_overhead(self) -> float:
        """Cost of coordinating a split operation, agreed across ranks.

        Times a minimal operation forced onto all rails against the same
        operation on each rail alone. The split waits for its slowest rail
        anyway, so only the excess over the slowest single rail is what the
        split itself costs per operation.
        """
        rails = self.rail_ids
        probe = np.zeros(self.world_size * len(rails), dtype=DTYPE)
        nbytes = probe.nbytes
        segs = split_even(nbytes, len(rails))
        split = list(zip(rails, segs))
        # fixed allocations: the table must not decide anything before the cost is known
        singles = {r: [] for r in rails}
        t_dual = []
        for _ in range(self.config.sync_probe_rounds):
            for r in rails:
                singles[r].append(self._timed(probe, [(r, Segment(0, nbytes))]))
            t_dual.append(self._timed(probe, split))
        slowest = max(float(np.median(v)) for v in singles.values())
        local = max(0.0, float(np.median(t_dual)) - slowest)
        agreed = float(self.agree_mean([local])[0])
        self.balancer.set_sync_overhead(agreed)
        return agreed

    def _timed(self, tensor, allocation) -> float:
        return self._run(tensor, allocation, record=False).latency_us

    # ------------------------------------------------------------------ ops

    def allreduce(self, tensor: np.ndarray) -> np.ndarray:
        """In-place sum across ranks; returns the same array."""
        if self._closed:
            raise RuntimeError("context closed")
        arr = tensor if isinstance(tensor, np.ndarray) else as_tensor(tensor)
        if arr.dtype != DTYPE or not arr.flags.c_contiguous:
            raise InvalidArgument("allreduce needs a contiguous float32 array")
        flat = arr.reshape(-1)
        if flat.nbytes == 0:
            return arr
        for packet in split_oversized(flat.nbytes):
            part = flat[packet.offset // 4:packet.end // 4]
            self._run(part, self.policy.allocate(part.nbytes), record=True)
        return arr

    def _chunk_size(self, seg: Segment) -> int | None:
        if self.config.algorithm is Algorithm.RING_CHUNKED:
            return self.config.chunk_size or default_chunk_size(seg.length, self.world_size)
        return None

    def _rail_dead(self, rail: int) -> bool:
        return rail in self.agreed_failed or self.monitor.status(rail) is Health.FAILED

    def _segment_task(self, handle: OpHandle, buf: UnboundBuffer, restore: np.ndarray | None = None):
        if restore is not None:
            buf.view(handle.segment)[:] = restore
        if self._rail_dead(handle.rail_id):
            snap = buf.view(handle.segment).copy()
            buf.snapshots[(handle.rail_id, handle.segment.offset)] = snap
            raise OperationAborted(handle, chunk_bounds(handle.segment, handle.chunk_size), 0, snap,
                                   ChannelDown("rail already failed", handle.rail_id))
        t0 = time.perf_counter()
        allreduce_segment(handle, buf, self.rank, self.world_size, self.conns.rail(handle.rail_id),
                          max_frame_payload=self.profiles[handle.rail_id].max_frame_payload,
                          recv_timeout=self.config.recv_timeout, pool=self.pool)
        return (time.perf_counter() - t0) * 1e6

    def _run(self, tensor: np.ndarray, allocation, record: bool) -> OpRecord:
        self.op_seq += 1
        seq = self.op_seq & SEQ_MASK
        t0 = time.perf_counter()
        buf = UnboundBuffer(tensor)
        handles = [OpHandle(seq, seg, r, self.config.algorithm, chunk_size=self._chunk_size(seg))
                   for r, seg in sorted(allocation, key=lambda x: x[1].offset)]
        futures = [(h, self.executors[h.rail_id].submit(self._segment_task, h, buf)) for h in handles]
        rail_lat, aborted = {}, {}
        for h, fut in futures:
            try:
                rail_lat[h.rail_id] = fut.result()
            except OperationAborted as exc:
                aborted[h.segment.offset] = exc
                self.monitor.fail(h.rail_id, f"aborted: {exc.cause}")
        failed_before = set(self.agreed_failed)
        tickets = []
        if len(self.rail_ids) - len(self.agreed_failed) >= 2:
            tickets = self._settle(handles, aborted, buf)
        elif aborted:
            raise UnrecoverableFailure(f"rail failed with no alternative: {next(iter(aborted.values()))}")
        latency = (time.perf_counter() - t0) * 1e6
        if self.config.latency_model is not None and not aborted:
            rail_lat, latency = self.config.latency_model([(h.rail_id, h.segment) for h in handles],
                                                          tensor.nbytes)
        rec = OpRecord(seq, tensor.nbytes, [(h.rail_id, h.segment) for h in handles], latency, rail_lat, tickets)
        # only clean operations feed the balancer; this test is identical on all ranks
        learn = self.policy is self.balancer
        if learn and record and not tickets and self.agreed_failed == failed_before:
            ev = self.balancer.record_operation(tensor.nbytes, rail_lat, latency, apply=False)
            if ev is not None:
                self._apply_agreed(ev)
                rec.flushed = True
        if record:
            self.history.append(rec)
        return rec

    def _apply_agreed(self, ev: FlushEvent) -> None:
        rails = sorted(ev.rail_means)
        vals = self.agree_mean([ev.rail_means[r] for r in rails] + [ev.op_mean])
        ev.rail_means = {r: float(v) for r, v in zip(rails, vals[:-1])}
        ev.op_mean = float(vals[-1])
        self.balancer.apply_flush(ev)

    def _settle(self, handles: list[OpHandle], aborted: dict, buf: UnboundBuffer) -> list[HandoffTicket]:
        """Agree on per-segment progress and failed rails; re-run orphaned chunks.

        Each round exchanges status records, takes the minimum completed
        chunk count per segment over all ranks, and re-runs every unfinished
        tail on the surviving rail with the largest share. A round's re-runs
        are themselves settled by the next round, so a second failure during
        handoff is absorbed as well.
        """
        tickets = []
        for _round in range(len(self.rail_ids) + 1):
            chunk_lists = [chunk_bounds(h.segment, h.chunk_size) for h in handles]
            progress = []
            for h, chunks in zip(handles, chunk_lists):
                exc = aborted.get(h.segment.offset)
                progress.append((exc.completed_chunks if exc else len(chunks), len(chunks)))
            status = pack_status(self.monitor.failed() | self.agreed_failed, progress)
            got = self.exchange(self._control_seq(), status, MsgType.HANDOFF if aborted else MsgType.ACK)

            failed = set(self.agreed_failed)
            min_done = [d for d, _ in progress]
            for blob in got.values():
                f, prog = unpack_status(blob)
                failed |= f
                min_done = [min(a, b[0]) for a, b in zip(min_done, prog)]
            for r in sorted(failed - self.agreed_failed):
                self.monitor.fail(r, "reported failed by a peer")
                self.balancer.exclude(r)
            self.agreed_failed |= failed

            orphans = [(h, rng) for h, chunks, d in zip(handles, chunk_lists, min_done)
                       if (rng := orphaned_range(chunks, d)) is not None]
            if not orphans:
                return tickets

            lengths = {}
            for h in handles:
                lengths[h.rail_id] = lengths.get(h.rail_id, 0) + h.segment.length
            jobs = []
            for h, rng in orphans:
                target = select_target(lengths, failed, self.rail_ids)
                exc = aborted.get(h.segment.offset)
                snap = exc.pristine if exc is not None else buf.snapshots[(h.rail_id, h.segment.offset)]
                lo = (rng.offset - h.segment.offset) // 4
                pristine = snap[lo:lo + rng.length // 4].copy()
                ticket = HandoffTicket(h.op_seq, rng, h.rail_id, target,
                                       failed_at=self.monitor.rails[h.rail_id].failed_at)
                hseq = HANDOFF_BIT | (self._control_seq() & SEQ_MASK)
                nh = OpHandle(hseq, rng, target, h.algorithm, chunk_size=h.chunk_size)
                fut = self.executors[target].submit(self._handoff_task, ticket, nh, buf, pristine)
                jobs.append((nh, fut))
                tickets.append(ticket)
                self.tickets.append(ticket)
            handles, aborted = [], {}
            for nh, fut in jobs:
                handles.append(nh)
                try:
                    fut.result()
                except OperationAborted as exc:
                    aborted[nh.segment.offset] = exc
                    self.monitor.fail(nh.rail_id, f"handoff aborted: {exc.cause}")
        raise UnrecoverableFailure("handoff did not settle")

    def _handoff_task(self, ticket: HandoffTicket, handle: OpHandle, buf: UnboundBuffer, pristine):
        ticket.resumed_at = time.perf_counter()
        self._segment_task(handle, buf, restore=pristine)
        ticket.completed_at = time.perf_counter()

    # ------------------------------------------------------------------ health

    def restore_rail(self, rail_id: int, channels) -> None:
        for ch in channels.values():
            self._install_sink(ch)
        self.monitor.restore(rail_id, channels)

    def readmit(self, rail_id: int) -> bool:
        """Collective: every rank must call it at the same point.

        The rail comes back only if every rank has seen it healthy for the
        readmission period; it then resumes its last converged share.
        """
        if rail_id not in self.profiles:
            raise ReadmitRejected(f"unknown rail {rail_id}")
        ok = self.monitor.can_readmit(rail_id)
        votes = self.agree_mean([1.0 if ok else 0.0])
        if votes[0] < 1.0:
            if not ok:
                raise ReadmitRejected(f"rail {rail_id} not ready for readmission")
            raise ReadmitRejected(f"a peer rejected readmission of rail {rail_id}")
        self.monitor.readmit(rail_id)
        self.agreed_failed.discard(rail_id)
        self.balancer.readmit(rail_id)
        return True

    def inject_failure(self, rail_id: int) -> None:
        """Emulate losing this rank's NIC for ``rail_id``."""
        self.conns.fail_rail(rail_id)

    # ------------------------------------------------------------------ misc

    def bytes_sent(self, rail_id: int | None = None) -> int:
        return self.conns.counters(rail_id)["payload_bytes_sent"]

    def close(self, graceful: bool = True) -> None:
        """Tear down. A graceful close is collective: it waits for every
        rank so that nobody loses a channel while peers are mid-operation."""
        if self._closed:
            return
        self._closed = True
        if graceful and self._carriers():
            try:
                self.barrier()
            except UnrecoverableFailure as exc:
                log.warning("rank %d: closing without barrier: %s", self.rank, exc)
        self.monitor.stop()
        for ex in self.executors.values():
            ex.shutdown()
        if graceful:
            lingering = [ch for ch in self.conns.ordered() if ch.finish_sending()]
            deadline = time.monotonic() + 2.0
            for ch in lingering:
                ch.wait_down(max(0.0, deadline - time.monotonic()))
        self.conns.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
