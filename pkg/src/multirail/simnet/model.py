"""Latency of one rail's share of a ring allreduce, in virtual microseconds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..balancer import fit_line
from ..collective import Algorithm, default_chunk_size
from ..core import InvalidArgument, ProtocolKind, RailProfile
from .calibration import CalibratedProfile


@dataclass
class SimConfig:
    """Knobs of the virtual network.

    ``contention`` (per protocol, overrides each profile's own sensitivity)
    scales the slowdown a rail suffers while its siblings carry the rest of
    a split operation; it is quoted at ``n_cal`` nodes and shrinks as
    1/(N-1) with more nodes. ``sync_overhead`` is paid once by every
    operation that uses more than one rail. The congestion penalty, off by
    default, stretches transfer time once a rail's offered load passes
    ``congestion_onset`` of what it can take.
    """

    n_cal: int = 4
    contention: dict | None = None
    sync_overhead: float = 400.0
    reduce_cost: float = 0.0          # µs per byte reduced on the host
    slice_size: int = 256 * 1024
    slice_metadata: float = 300.0
    slice_passes: int = 5
    congestion: bool = False
    congestion_knee: int = 64         # nodes a rail serves at full offered load
    congestion_onset: float = 0.8
    congestion_gain: float = 0.25
    jitter: float = 0.0               # relative std-dev of per-rail latency noise
    seed: int = 0
    window: int = 100

    def kappa(self, profile: RailProfile) -> float:
        if self.contention is not None:
            kind = profile.protocol_kind
            for k, v in self.contention.items():
                if ProtocolKind.parse(k) is kind:
                    return float(v)
        return profile.kappa


class RailModel:
    """Per-step cost model of one rail.

    A ring over N nodes runs 2(N-1) steps of S/N bytes each. For a
    synthetic profile a step costs t_setup + x/B. For a calibrated rail the
    step is read off the calibration curve: a step of x bytes costs
    L_cal(x * n_cal) / (2 (n_cal - 1)).
    """

    def __init__(self, rail: RailProfile | CalibratedProfile, config: SimConfig | None = None):
        self.config = config or SimConfig()
        if isinstance(rail, CalibratedProfile):
            self.calibrated: CalibratedProfile | None = rail
            self.profile = rail.profile
        else:
            self.calibrated = None
            self.profile = rail
        self.rail_id = self.profile.rail_id
        self.kappa = self.config.kappa(self.profile)
        self._cache: dict = {}

    # -- per-step pieces --

    def step(self, x: float) -> float:
        if self.calibrated is not None:
            n = self.calibrated.n_nodes
            return self.calibrated.latency(x * n) / (2 * (n - 1))
        if self.profile.efficiency_points is not None:
            return self.profile.latency(x)
        return self.profile.t_setup + self.profile.transfer_time(x)

    @property
    def step_setup(self) -> float:
        """Size-independent part of a step; the rest occupies the link."""
        return self.step(0.0)

    def occupancy(self, x: float) -> float:
        return max(0.0, self.step(x) - self.step_setup)

    # -- whole operation --

    def congestion_factor(self, share: float, fabric_nodes: int) -> float:
        c = self.config
        if not c.congestion:
            return 1.0
        load = share * fabric_nodes / c.congestion_knee
        return 1.0 + c.congestion_gain * max(0.0, load - c.congestion_onset)

    def op_latency(self, nbytes: int, nodes: int, algorithm: Algorithm = Algorithm.RING,
                   share: float = 1.0, fabric_nodes: int | None = None, chunk_size: int | None = None) -> float:
        """Ring allreduce of ``nbytes`` on this rail alone (no contention, no sync)."""
        if nodes < 2:
            raise InvalidArgument("ring needs at least 2 nodes")
        if nbytes <= 0:
            return 0.0
        key = (nbytes, nodes, algorithm, round(share, 12), fabric_nodes, chunk_size)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        stretch = self.congestion_factor(share, fabric_nodes or nodes)
        if algorithm is Algorithm.RING_CHUNKED:
            size = chunk_size or default_chunk_size(nbytes, nodes)
            val = self._pipelined(nbytes, nodes, size, stretch)
        else:
            x = nbytes / nodes
            per_step = self.step_setup + self.occupancy(x) * stretch
            val = 2 * (nodes - 1) * per_step + (nodes - 1) * x * self.config.reduce_cost
        self._cache[key] = val
        return val

    def _pipelined(self, nbytes: int, nodes: int, chunk: int, stretch: float) -> float:
        """Chunks traverse the ring one behind the other.

        Steps are issued step-major, chunk-minor as the live ring does. The
        link is serial (only occupancy blocks it), the fixed per-step setup
        overlaps with other chunks in flight, and reductions are serial on
        the host. Every rank behaves alike, so rank 0 stands for all.
        """
        k = max(1, min(nbytes // max(chunk, 1), 1 << 16))
        sizes = np.full(k, nbytes // k, dtype=float)
        sizes[-1] += nbytes - sizes.sum()
        x = sizes / nodes
        occ = np.array([self.occupancy(v) for v in x]) * stretch
        red = x * self.config.reduce_cost
        setup = self.step_setup
        steps = 2 * (nodes - 1)
        ready = np.zeros(k)
        link_free = 0.0
        cpu_free = 0.0
        for s in range(steps):
            reduce_step = s < nodes - 1
            for c in range(k):
                start = ready[c] if ready[c] > link_free else link_free
                link_free = start + occ[c]
                arrive = start + setup + occ[c]
                if reduce_step and red[c] > 0:
                    begin = arrive if arrive > cpu_free else cpu_free
                    cpu_free = begin + red[c]
                    arrive = cpu_free
                ready[c] = arrive
        return float(ready.max())

    def contention(self, op: float, share: float, nodes: int) -> float:
        """Extra time while sibling rails carry the remaining 1 - share."""
        if share >= 1.0 or share <= 0.0:
            return 0.0
        return self.kappa * (1.0 - share) * (self.config.n_cal - 1) / (nodes - 1) * op

    def latency(self, nbytes: int, nodes: int, share: float, algorithm: Algorithm = Algorithm.RING,
                fabric_nodes: int | None = None) -> float:
        """This rail's finish time for its part of a (possibly split) operation."""
        op = self.op_latency(nbytes, nodes, algorithm, share, fabric_nodes)
        return op + self.contention(op, share, nodes)

    def model_profile(self, nodes: int, algorithm: Algorithm = Algorithm.RING) -> RailProfile:
        """Two-parameter whole-operation model at ``nodes`` for the balancer."""
        sizes = np.geomspace(1024, 1 << 30, 31)
        t, b = fit_line([(s, self.op_latency(int(s), nodes, algorithm)) for s in sizes])
        return RailProfile(self.rail_id, self.profile.protocol_kind, t, b,
                           cpu_sensitivity=self.profile.cpu_sensitivity)


def models_for(rails, config: SimConfig | None = None) -> list[RailModel]:
    config = config or SimConfig()
    out = [RailModel(r, config) for r in rails]
    ids = [m.rail_id for m in out]
    if len(set(ids)) != len(ids):
        raise InvalidArgument(f"duplicate rail ids {ids}")
    return out
