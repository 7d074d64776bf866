"""Value types shared by every layer: rail profiles, segments, buckets, ops."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np

ELEMENT_BYTES = 4
DTYPE = np.float32


class InvalidArgument(ValueError):
    pass


class ProtocolKind(Enum):
    TCP = "tcp"
    SHARP = "sharp"
    GLEX = "glex"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, name: "str | ProtocolKind") -> "ProtocolKind":
        if isinstance(name, ProtocolKind):
            return name
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise InvalidArgument(f"unknown protocol {name!r}") from None


# How strongly a rail slows down when it shares host CPU with another busy
# rail. Kernel TCP is mostly copy bound; the offloaded protocols poll hard
# on the host and lose more when a sibling rail is active.
DEFAULT_CPU_SENSITIVITY = {
    ProtocolKind.TCP: 0.2,
    ProtocolKind.SHARP: 1.2,
    ProtocolKind.GLEX: 1.2,
    ProtocolKind.CUSTOM: 0.2,
}


@dataclass(frozen=True)
class RailProfile:
    """Performance model of one rail.

    ``t_setup`` is in microseconds, ``bandwidth`` in bytes per second. When
    ``efficiency_points`` are given, :meth:`latency` interpolates between
    them instead of using the two-parameter model.
    """

    rail_id: int
    protocol_kind: ProtocolKind = ProtocolKind.TCP
    t_setup: float = 0.0
    bandwidth: float = math.inf
    efficiency_points: tuple[tuple[int, float], ...] | None = None
    max_frame_payload: int = 64 * 1024
    cpu_sensitivity: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "protocol_kind", ProtocolKind.parse(self.protocol_kind))
        if self.t_setup < 0 or not math.isfinite(self.t_setup):
            raise InvalidArgument(f"t_setup must be finite and >= 0, got {self.t_setup}")
        if not self.bandwidth > 0:
            raise InvalidArgument(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.max_frame_payload <= 0:
            raise InvalidArgument("max_frame_payload must be > 0")
        if self.efficiency_points is not None:
            pts = tuple((int(s), float(l)) for s, l in self.efficiency_points)
            if not pts:
                raise InvalidArgument("efficiency_points must not be empty")
            for (s0, l0), (s1, l1) in zip(pts, pts[1:]):
                if s1 <= s0 or l1 <= l0:
                    raise InvalidArgument("efficiency_points must be strictly increasing in size and latency")
            object.__setattr__(self, "efficiency_points", pts)

    @property
    def kappa(self) -> float:
        if self.cpu_sensitivity is not None:
            return self.cpu_sensitivity
        return DEFAULT_CPU_SENSITIVITY[self.protocol_kind]

    def transfer_time(self, size: float) -> float:
        """Pure serialization time S/B in microseconds."""
        if math.isinf(self.bandwidth):
            return 0.0
        return size / self.bandwidth * 1e6

    def latency(self, size: float) -> float:
        """Modelled one-message latency for ``size`` bytes, in microseconds."""
        if self.efficiency_points is None:
            return self.t_setup + self.transfer_time(size)
        return interpolate_latency(self.efficiency_points, size)

    def throughput(self, size: float) -> float:
        """Real-time throughput in bytes/s for a message of ``size`` bytes."""
        lat = self.latency(size)
        if lat <= 0:
            return math.inf
        return size / lat * 1e6

    def with_id(self, rail_id: int) -> "RailProfile":
        return RailProfile(rail_id, self.protocol_kind, self.t_setup, self.bandwidth,
                           self.efficiency_points, self.max_frame_payload, self.cpu_sensitivity)


def interpolate_latency(points: Sequence[tuple[int, float]], size: float) -> float:
    """Piecewise-linear latency curve through ``points``.

    Flat below the smallest sample, linear extrapolation past the largest.
    """
    sizes = np.array([p[0] for p in points], dtype=float)
    lats = np.array([p[1] for p in points], dtype=float)
    if len(points) == 1 or size <= sizes[-1]:
        return float(np.interp(size, sizes, lats))
    slope = (lats[-1] - lats[-2]) / (sizes[-1] - sizes[-2])
    return float(lats[-1] + slope * (size - sizes[-1]))


@dataclass(frozen=True, order=True)
class Segment:
    offset: int
    length: int

    def __post_init__(self):
        if self.offset < 0 or self.length < 0:
            raise InvalidArgument(f"bad segment {self.offset}+{self.length}")

    @property
    def end(self) -> int:
        return self.offset + self.length

    def sub(self, start: int, stop: int) -> "Segment":
        """Sub-segment of relative byte range [start, stop)."""
        return Segment(self.offset + start, stop - start)


@dataclass(frozen=True, order=True)
class SizeBucket:
    """Payload sizes in [2^k, 2^(k+1))."""
    bucket_index: int

    @classmethod
    def of(cls, size: int) -> "SizeBucket":
        return cls(size_bucket(size))

    @property
    def low(self) -> int:
        return 1 << self.bucket_index

    @property
    def high(self) -> int:
        return 1 << (self.bucket_index + 1)


def size_bucket(size: int) -> int:
    if size <= 0:
        raise InvalidArgument(f"size must be positive, got {size}")
    return int(size).bit_length() - 1


class ReduceOp(Enum):
    SUM = "sum"

    def combine(self, acc: np.ndarray, incoming: np.ndarray) -> None:
        """acc <- acc (op) incoming, in place."""
        if self is ReduceOp.SUM:
            np.add(acc, incoming, out=acc)
        else:  # pragma: no cover
            raise NotImplementedError(self)

    def reduce_all(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        out = np.array(arrays[0], dtype=DTYPE, copy=True)
        for a in arrays[1:]:
            self.combine(out, a)
        return out


def as_tensor(data) -> np.ndarray:
    """Contiguous float32 view (copy only if needed)."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    return arr.reshape(-1)


def ring_volume(node_count: int, payload: int) -> int:
    """Bytes each rank sends in a ring allreduce of ``payload`` bytes."""
    if node_count < 2:
        raise InvalidArgument(f"ring needs at least 2 nodes, got {node_count}")
    if payload < 0:
        raise InvalidArgument("payload must be >= 0")
    exact = Fraction(2 * (node_count - 1) * payload, node_count)
    return round(exact)


def network_efficiency(profile: RailProfile, payload: float) -> float:
    """Fraction of time spent moving bytes: 1 / (1 + t_setup / (S/B))."""
    if payload <= 0:
        raise InvalidArgument("payload must be > 0")
    transfer = profile.transfer_time(payload)
    if profile.t_setup == 0:
        return 1.0
    if transfer == 0:
        return 0.0
    return 1.0 / (1.0 + profile.t_setup / transfer)


def round4(nbytes: float) -> int:
    return int(nbytes) // ELEMENT_BYTES * ELEMENT_BYTES


def split_by_ratios(total: int, alpha: Sequence[float]) -> list[Segment]:
    """Contiguous element-aligned segments proportional to ``alpha``.

    Every boundary is rounded down to 4 bytes; the last participating rail
    absorbs the remainder. Rails with zero share get an empty segment.
    """
    if total % ELEMENT_BYTES:
        raise InvalidArgument("payload must be a whole number of elements")
    alpha = [float(a) for a in alpha]
    if any(a < 0 for a in alpha) or not alpha:
        raise InvalidArgument("alpha must be non-negative")
    s = sum(alpha)
    if s <= 0:
        raise InvalidArgument("alpha must not be all zero")
    last = max(i for i, a in enumerate(alpha) if a > 0)
    segs = []
    offset = 0
    for i, a in enumerate(alpha):
        if i == last:
            length = total - offset
        elif a == 0:
            length = 0
        else:
            length = min(round4(a / s * total), total - offset)
        segs.append(Segment(offset, length))
        offset += length
    # empty trailing rails sit at the end of the buffer
    return segs


def split_even(total: int, parts: int, align: int = ELEMENT_BYTES) -> list[Segment]:
    """``parts`` contiguous blocks; the last one absorbs the remainder."""
    if parts <= 0:
        raise InvalidArgument("parts must be positive")
    base = total // parts // align * align
    segs = [Segment(i * base, base) for i in range(parts - 1)]
    segs.append(Segment((parts - 1) * base, total - (parts - 1) * base))
    return segs


def covers_exactly(segments: Sequence[Segment], total: int) -> bool:
    """True iff the non-empty segments are disjoint and tile [0, total)."""
    pos = 0
    for seg in sorted(s for s in segments if s.length > 0):
        if seg.offset != pos:
            return False
        pos = seg.end
    return pos == total
