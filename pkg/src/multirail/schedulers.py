"""Static baselines for live runs: a fixed-ratio split and slice-to-idle dispatch.

Both borrow the balancer's rail models and exclusion set so failover works
the same way, but neither learns from measured latencies.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .balancer import Balancer, NoHealthyRail
from .core import InvalidArgument, Segment, split_by_ratios


class FixedRatioPolicy:
    """Same proportions for every payload; by default the rails' bandwidths."""

    name = "fixed"

    def __init__(self, balancer: Balancer, ratios: Sequence[float] | None = None):
        self.balancer = balancer
        if ratios is None:
            ratios = [m.bandwidth for m in balancer.models]
        r = np.asarray(ratios, dtype=float)
        if len(r) != len(balancer.rail_ids) or (r < 0).any() or r.sum() <= 0:
            raise InvalidArgument(f"bad ratios {list(ratios)}")
        self.ratios = r / r.sum()

    def allocate(self, payload: int) -> list[tuple[int, Segment]]:
        b = self.balancer
        alive = np.array([r not in b.excluded for r in b.rail_ids], dtype=float)
        a = self.ratios * alive
        if a.sum() <= 0:
            if not alive.any():
                raise NoHealthyRail("every rail is excluded")
            a = alive
        a = a / a.sum()
        segs = split_by_ratios(payload, list(a))
        return [(r, s) for r, s, x in zip(b.rail_ids, segs, a) if x > 0 and s.length > 0]

    def state_of(self, payload: int) -> str:
        return "fixed"


class SlicePolicy:
    """Cut the payload into fixed slices; each goes to the rail predicted to
    be idle first. The prediction uses the shared rail models, so every rank
    computes the same assignment without talking to the others."""

    name = "slice"

    def __init__(self, balancer: Balancer, slice_size: int = 256 * 1024, metadata_us: float = 300.0):
        if slice_size <= 0 or slice_size % 4:
            raise InvalidArgument("slice size must be a positive multiple of 4")
        self.balancer = balancer
        self.slice_size = slice_size
        self.metadata_us = metadata_us

    def allocate(self, payload: int) -> list[tuple[int, Segment]]:
        b = self.balancer
        live = [m for m in b.models if m.rail_id not in b.excluded]
        if not live:
            raise NoHealthyRail("every rail is excluded")
        free = {m.rail_id: 0.0 for m in live}
        out, off = [], 0
        while off < payload:
            n = min(self.slice_size, payload - off)
            m = min(live, key=lambda p: (free[p.rail_id], p.rail_id))
            free[m.rail_id] += m.latency(n) + self.metadata_us
            out.append((m.rail_id, Segment(off, n)))
            off += n
        return out

    def state_of(self, payload: int) -> str:
        return "slice"


def make_policy(name: str, balancer: Balancer, ratios=None):
    """'nezha' returns the balancer itself."""
    key = name.lower().replace("-", "").replace("_", "")
    if key == "nezha":
        return balancer
    if key in ("fixed", "fixedratio"):
        return FixedRatioPolicy(balancer, ratios)
    if key in ("slice", "slicetoidle"):
        return SlicePolicy(balancer)
    raise InvalidArgument(f"unknown scheduler {name!r}")
