"""Binary framing: fixed 29-byte little-endian header followed by the payload."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

MAGIC = b"NZHA"
HEADER = struct.Struct("<4sBIIQQ")
HEADER_SIZE = HEADER.size  # 29

U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF


class TransportError(Exception):
    pass


class ChannelDown(TransportError):
    """The peer (or the local end) of a channel is gone."""

    def __init__(self, msg="channel down", rail_id=None, peer_rank=None):
        super().__init__(msg)
        self.rail_id = rail_id
        self.peer_rank = peer_rank


class ProtocolError(TransportError):
    pass


class RendezvousTimeout(TransportError):
    pass


class BindError(TransportError):
    pass


class MsgType(IntEnum):
    DATA = 1
    ACK = 2
    HEALTH = 3
    HANDOFF = 4


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    op_seq: int = 0
    chunk_index: int = 0
    offset: int = 0
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)

    def header(self) -> bytes:
        return encode_header(self.msg_type, self.op_seq, self.chunk_index, self.offset, len(self.payload))

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.msg_type == other.msg_type and self.op_seq == other.op_seq
                and self.chunk_index == other.chunk_index and self.offset == other.offset
                and bytes(self.payload) == bytes(other.payload))

    __hash__ = None


def encode_header(msg_type, op_seq, chunk_index, offset, length) -> bytes:
    if not (0 <= op_seq <= U32_MAX and 0 <= chunk_index <= U32_MAX):
        raise ProtocolError("op_seq/chunk_index out of u32 range")
    if not (0 <= offset <= U64_MAX and 0 <= length <= U64_MAX):
        raise ProtocolError("offset/length out of u64 range")
    return HEADER.pack(MAGIC, int(msg_type), op_seq, chunk_index, offset, length)


def decode_header(buf) -> tuple[MsgType, int, int, int, int]:
    if len(buf) < HEADER_SIZE:
        raise ProtocolError(f"short header: {len(buf)} bytes")
    magic, mtype, op_seq, chunk, offset, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {mtype}") from None
    return mtype, op_seq, chunk, offset, length


def encode(frame: Frame) -> bytes:
    return frame.header() + bytes(frame.payload)


def decode(buf) -> Frame:
    mtype, op_seq, chunk, offset, length = decode_header(buf)
    body = bytes(buf[HEADER_SIZE:])
    if len(body) != length:
        raise ProtocolError(f"payload length {len(body)} != header length {length}")
    return Frame(mtype, op_seq, chunk, offset, body)


def fragment(payload, max_frame_payload: int):
    """Yield memoryview pieces of at most ``max_frame_payload`` bytes.

    An empty payload still yields one (empty) piece so that every logical
    message produces at least one frame.
    """
    view = memoryview(payload).cast("B")
    n = len(view)
    if n == 0:
        yield view
        return
    for start in range(0, n, max_frame_payload):
        yield view[start:start + max_frame_payload]


def frame_count(nbytes: int, max_frame_payload: int) -> int:
    return max(1, -(-nbytes // max_frame_payload))
