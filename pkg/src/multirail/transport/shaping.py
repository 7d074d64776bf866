"""Rate and latency shaping for emulated rails."""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

from ..core import RailProfile


def sleep_until(deadline: float) -> None:
    """Sleep until ``time.perf_counter()`` reaches ``deadline``.

    Plain sleeps only: busy-waiting would starve sibling rank threads on a
    small machine, and oversleeping keeps shaping conservative.
    """
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(remaining)


class PhysicalLink:
    """Serialization resource shared by every channel mapped onto one link.

    Virtual-scheduling token bucket: a frame of ``n`` bytes occupies the
    link for ``n / rate`` seconds after the previous frame, and the bucket
    never holds more than one frame's worth of credit.
    """

    def __init__(self, rate: float, link_id: str = ""):
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.link_id = link_id
        self._lock = threading.Lock()
        self._next_free = 0.0

    def reserve(self, nbytes: int) -> float:
        """Book ``nbytes`` on the link; returns when the frame has left."""
        if math.isinf(self.rate):
            return time.perf_counter()
        with self._lock:
            start = max(time.perf_counter(), self._next_free)
            self._next_free = start + nbytes / self.rate
            return self._next_free


@dataclass
class Shaper:
    """Per-direction shaping derived from a rail profile."""

    profile: RailProfile
    link: PhysicalLink | None = None

    def __post_init__(self):
        if self.link is None:
            self.link = PhysicalLink(self.profile.bandwidth, f"rail{self.profile.rail_id}")

    def pace(self, nbytes: int) -> None:
        """Block the sender until ``nbytes`` have been serialized."""
        sleep_until(self.link.reserve(nbytes))

    def delay(self, nbytes: int) -> float:
        """Extra one-way latency (seconds) added at the receiver."""
        p = self.profile
        if p.efficiency_points is None:
            return p.t_setup * 1e-6
        extra = p.latency(nbytes) - p.transfer_time(nbytes)
        return max(0.0, extra) * 1e-6
