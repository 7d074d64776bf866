"""Ring and pipelined ring allreduce over one rail's segment of the shared buffer."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .balancer import Phase
from .core import (DTYPE, ELEMENT_BYTES, InvalidArgument, ReduceOp, Segment, as_tensor,
                   split_even)
from .transport.channel import Channel, SendHandle
from .transport.frame import ChannelDown, Frame, MsgType, ProtocolError, fragment

MIN_CHUNK = 64 * 1024
PACKET_LIMIT = 1 << 30
PACKET_SIZE = 256 * (1 << 20)


class Algorithm(Enum):
    RING = "ring"
    RING_CHUNKED = "ring-chunked"

    @classmethod
    def parse(cls, name: "str | Algorithm") -> "Algorithm":
        if isinstance(name, Algorithm):
            return name
        return cls(name.strip().lower().replace("_", "-"))


@dataclass(frozen=True)
class OpHandle:
    op_seq: int
    segment: Segment
    rail_id: int
    algorithm: Algorithm = Algorithm.RING
    reduce_op: ReduceOp = ReduceOp.SUM
    chunk_size: int | None = None


class UnboundBuffer:
    """The caller's tensor plus per-rail read positions and a completion counter."""

    def __init__(self, tensor: np.ndarray):
        if tensor.dtype != DTYPE or not tensor.flags.c_contiguous:
            raise InvalidArgument("buffer must be a contiguous float32 array")
        self.array = tensor.reshape(-1)
        self.nbytes = self.array.nbytes
        self.positions: dict[int, tuple[int, int]] = {}
        self.completed = 0
        self.snapshots: dict[tuple[int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    def bind(self, rail_id: int, segment: Segment) -> None:
        if segment.end > self.nbytes:
            raise InvalidArgument(f"segment {segment} outside buffer of {self.nbytes} bytes")
        with self._lock:
            self.positions[rail_id] = (segment.offset, segment.length)

    def view(self, segment: Segment) -> np.ndarray:
        if segment.offset % ELEMENT_BYTES or segment.length % ELEMENT_BYTES:
            raise InvalidArgument("segment not element aligned")
        if segment.end > self.nbytes:
            raise InvalidArgument("segment outside buffer")
        lo = segment.offset // ELEMENT_BYTES
        return self.array[lo:lo + segment.length // ELEMENT_BYTES]

    def complete(self, rail_id: int) -> None:
        with self._lock:
            self.positions.pop(rail_id, None)
            self.completed += 1

    @property
    def released(self) -> bool:
        return not self.positions


class OperationAborted(Exception):
    """A rail lost a channel mid-operation.

    ``completed_chunks`` leading chunks hold final results on this rank;
    ``pristine`` is this rank's original input for the whole segment so the
    rest can be recomputed elsewhere.
    """

    def __init__(self, handle: OpHandle, chunks: list[Segment], completed_chunks: int,
                 pristine: np.ndarray, cause: BaseException | None = None):
        super().__init__(f"op {handle.op_seq} aborted on rail {handle.rail_id} after "
                         f"{completed_chunks}/{len(chunks)} chunks: {cause}")
        self.handle = handle
        self.op_seq = handle.op_seq
        self.segment = handle.segment
        self.rail_id = handle.rail_id
        self.chunks = chunks
        self.completed_chunks = completed_chunks
        self.pristine = pristine
        self.cause = cause


def default_chunk_size(segment_length: int, world_size: int) -> int:
    return max(MIN_CHUNK, segment_length // (2 * world_size))


def chunk_bounds(segment: Segment, chunk_size: int | None) -> list[Segment]:
    """Element-aligned chunks of ``segment``; the last absorbs the remainder."""
    if chunk_size is None or chunk_size >= segment.length:
        return [segment]
    chunk_size = max(ELEMENT_BYTES, chunk_size // ELEMENT_BYTES * ELEMENT_BYTES)
    n = segment.length // chunk_size
    if n <= 1:
        return [segment]
    out = [Segment(segment.offset + i * chunk_size, chunk_size) for i in range(n - 1)]
    out.append(Segment(segment.offset + (n - 1) * chunk_size, segment.length - (n - 1) * chunk_size))
    return out


def split_oversized(payload: int) -> list[Segment]:
    """Contiguous packets of at most 256 MiB once a payload exceeds 1 GiB."""
    if payload <= 0:
        raise InvalidArgument("payload must be positive")
    if payload <= PACKET_LIMIT:
        return [Segment(0, payload)]
    count = -(-payload // PACKET_SIZE)
    return [Segment(i * PACKET_SIZE, min(PACKET_SIZE, payload - i * PACKET_SIZE)) for i in range(count)]


class _Ring:
    """Shared machinery of the plain and chunked ring.

    Each chunk is reduce-scattered then all-gathered across ``N`` blocks.
    Steps are issued in step-major, chunk-minor order: with several chunks a
    chunk's next step leaves as soon as its own data is in, while later
    chunks are still on the wire.
    """

    def __init__(self, handle: OpHandle, buffer: UnboundBuffer, rank: int, world_size: int,
                 channels: Mapping[int, Channel], chunk_size: int | None, max_frame_payload: int,
                 recv_timeout: float | None, pool=None):
        self.h = handle
        self.pool = pool
        self.mfp = max(1, max_frame_payload)
        self.buf = buffer
        self.rank = rank
        self.n = world_size
        self.right = channels[(rank + 1) % world_size]
        self.left = channels[(rank - 1) % world_size]
        self.chunks = chunk_bounds(handle.segment, chunk_size)
        self.blocks = [[Segment(c.offset + b.offset, b.length) for b in split_even(c.length, world_size)]
                       for c in self.chunks]
        self.recv_timeout = recv_timeout
        self.send_seq = 0
        self.recv_seq = 0
        self.handles: list[SendHandle] = []
        self.completed = 0

    def _send_block(self, seg: Segment):
        data = self.buf.view(seg).tobytes()
        mfp = self.mfp
        for piece_no, piece in enumerate(fragment(data, mfp)):
            off = seg.offset + piece_no * mfp
            self.handles.append(self.right.send(Frame(MsgType.DATA, self.h.op_seq, self.send_seq, off, piece)))
            self.send_seq += 1

    def _recv_block(self, seg: Segment) -> np.ndarray:
        self._check_sends()
        mfp = self.mfp
        expected = max(1, -(-seg.length // mfp))
        parts = []
        for piece_no in range(expected):
            f = self.left.recv(MsgType.DATA, self.recv_timeout)
            if f.op_seq != self.h.op_seq:
                raise ProtocolError(f"op_seq mismatch on rail {self.h.rail_id}: got {f.op_seq}, "
                                    f"expected {self.h.op_seq}")
            if f.chunk_index != self.recv_seq or f.offset != seg.offset + piece_no * mfp:
                raise ProtocolError(f"out-of-order frame: chunk {f.chunk_index} offset {f.offset}")
            self.recv_seq += 1
            parts.append(f.payload)
        raw = parts[0] if len(parts) == 1 else b"".join(parts)
        if len(raw) != seg.length:
            raise ProtocolError(f"block length {len(raw)} != {seg.length}")
        return np.frombuffer(raw, dtype=DTYPE)

    def _check_sends(self):
        # surface asynchronous send failures early; drop completed handles
        keep = []
        for h in self.handles:
            if h.done():
                h.wait(0)
            else:
                keep.append(h)
        self.handles = keep

    def _send_step(self, c: int, s: int):
        n, r = self.n, self.rank
        if s < n - 1:
            b = (r - s) % n
        else:
            b = (r + 1 - (s - (n - 1))) % n
        self._send_block(self.blocks[c][b])

    def _recv_step(self, c: int, s: int):
        n, r = self.n, self.rank
        if s < n - 1:
            seg = self.blocks[c][(r - s - 1) % n]
            incoming = self._recv_block(seg)
            if self.pool is None:
                self.h.reduce_op.combine(self.buf.view(seg), incoming)
            else:
                with self.pool.phase(self.h.rail_id, Phase.COMPUTATION):
                    self.h.reduce_op.combine(self.buf.view(seg), incoming)
        else:
            seg = self.blocks[c][(r - (s - (n - 1))) % n]
            self.buf.view(seg)[:] = self._recv_block(seg)

    def run(self):
        steps = 2 * (self.n - 1)
        for c in range(len(self.chunks)):
            self._send_step(c, 0)
        for s in range(steps):
            for c in range(len(self.chunks)):
                self._recv_step(c, s)
                if s + 1 < steps:
                    self._send_step(c, s + 1)
                else:
                    self.completed = c + 1
        for h in self.handles:
            h.wait()
        self.handles = []


def _run(handle: OpHandle, buffer: UnboundBuffer, rank: int, world_size: int,
         channels: Mapping[int, Channel], chunk_size, max_frame_payload, recv_timeout, pool=None):
    if world_size < 2:
        raise InvalidArgument("allreduce needs at least 2 ranks")
    buffer.bind(handle.rail_id, handle.segment)
    ring = _Ring(handle, buffer, rank, world_size, channels, chunk_size, max_frame_payload,
                 recv_timeout, pool)
    # kept so the segment can be recomputed elsewhere if a peer loses the rail
    pristine = buffer.view(handle.segment).copy()
    buffer.snapshots[(handle.rail_id, handle.segment.offset)] = pristine
    try:
        ring.run()
    except (ChannelDown, OperationAborted) as exc:
        raise OperationAborted(handle, ring.chunks, ring.completed, pristine, exc) from exc
    buffer.complete(handle.rail_id)
    return ring


def ring_allreduce(handle: OpHandle, buffer: UnboundBuffer, rank: int, world_size: int,
                   channels: Mapping[int, Channel], *, max_frame_payload: int = 64 * 1024,
                   recv_timeout: float | None = None, pool=None):
    """In-place ring allreduce of ``handle.segment`` over one rail's channels.

    ``channels`` maps peer rank to channel. Raises :class:`OperationAborted`
    if a channel goes down mid-operation.
    """
    return _run(handle, buffer, rank, world_size, channels, None, max_frame_payload, recv_timeout, pool)


def ring_chunked_allreduce(handle: OpHandle, buffer: UnboundBuffer, rank: int, world_size: int,
                           channels: Mapping[int, Channel], chunk_size: int | None = None, *,
                           max_frame_payload: int = 64 * 1024, recv_timeout: float | None = None,
                           pool=None):
    """Pipelined ring: the segment is cut into chunks whose steps overlap."""
    if chunk_size is None:
        chunk_size = handle.chunk_size or default_chunk_size(handle.segment.length, world_size)
    return _run(handle, buffer, rank, world_size, channels, chunk_size, max_frame_payload, recv_timeout, pool)


def allreduce_segment(handle: OpHandle, buffer: UnboundBuffer, rank: int, world_size: int,
                      channels: Mapping[int, Channel], **kw):
    if handle.algorithm is Algorithm.RING_CHUNKED:
        return ring_chunked_allreduce(handle, buffer, rank, world_size, channels, handle.chunk_size, **kw)
    return ring_allreduce(handle, buffer, rank, world_size, channels, **kw)


def reference_allreduce(inputs, reduce_op: ReduceOp = ReduceOp.SUM) -> np.ndarray:
    """Direct in-process reduction, used as the correctness oracle."""
    return reduce_op.reduce_all([as_tensor(x) for x in inputs])
