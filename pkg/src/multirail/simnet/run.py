"""Event-driven simulation of repeated allreduce operations on a virtual clock."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from ..balancer import Balancer, BalancerConfig, BucketState
from ..collective import Algorithm
from ..core import InvalidArgument, split_by_ratios, split_even
from .events import EventKind, EventLoop, SimEvent
from .model import RailModel, SimConfig, models_for


class Scheduler(Enum):
    NEZHA = "nezha"
    FIXED = "fixed"
    SLICE = "slice"

    @classmethod
    def parse(cls, name: "str | Scheduler") -> "Scheduler":
        if isinstance(name, Scheduler):
            return name
        key = name.strip().lower().replace("_", "").replace("-", "")
        aliases = {"nezha": cls.NEZHA, "fixed": cls.FIXED, "fixedratio": cls.FIXED,
                   "slice": cls.SLICE, "slicetoidle": cls.SLICE}
        if key not in aliases:
            raise InvalidArgument(f"unknown scheduler {name!r}")
        return aliases[key]


@dataclass
class OpOutcome:
    op_seq: int
    size: int
    start: float
    end: float
    alpha: list
    rail_latency: dict

    @property
    def latency(self) -> float:
        return self.end - self.start


@dataclass
class SimResult:
    scheduler: Scheduler
    nodes: int
    size: int
    algorithm: Algorithm
    latency_us: float
    alpha: list
    state: str
    ops: list = field(default_factory=list)
    trace: list | None = None
    balancer: Balancer | None = None

    @property
    def throughput(self) -> float:
        """Payload bytes per second."""
        return self.size / self.latency_us * 1e6


class Simulation:
    """One representative rank driving ``rails`` through repeated operations.

    Each operation schedules SendStart, SendEnd and ReduceDone per
    participating rail; the operation ends when the last rail is done, plus
    the split synchronisation cost when more than one rail took part. The
    adaptive scheduler is the live :class:`Balancer`, fed from the virtual
    clock exactly as the engine feeds it from the wall clock.
    """

    def __init__(self, rails: Sequence, nodes: int, scheduler: Scheduler | str = Scheduler.NEZHA,
                 algorithm: Algorithm | str = Algorithm.RING, config: SimConfig | None = None,
                 ratios: Sequence[float] | None = None, balancer_config: BalancerConfig | None = None,
                 record: bool = False, fabric_nodes: int | None = None):
        if nodes < 2:
            raise InvalidArgument("need at least 2 nodes")
        self.config = config or SimConfig()
        self.models: list[RailModel] = models_for(rails, self.config)
        self.rail_ids = [m.rail_id for m in self.models]
        self.by_id = {m.rail_id: m for m in self.models}
        self.nodes = nodes
        self.fabric_nodes = fabric_nodes or nodes
        self.scheduler = Scheduler.parse(scheduler)
        self.algorithm = Algorithm.parse(algorithm)
        self.loop = EventLoop(record)
        self.rng = np.random.default_rng(self.config.seed)
        self.down: set[int] = set()
        self.op_seq = 0
        self.ratios = None
        if ratios is not None:
            r = np.asarray(ratios, dtype=float)
            if len(r) != len(self.models) or np.any(r < 0) or r.sum() <= 0:
                raise InvalidArgument("ratios must be nonnegative, one per rail")
            self.ratios = list(r / r.sum())
        self.balancer: Balancer | None = None
        if self.scheduler is Scheduler.NEZHA:
            cfg = balancer_config or BalancerConfig(window=self.config.window)
            self.balancer = Balancer([m.model_profile(nodes) for m in self.models], cfg)
            if len(self.models) > 1 and cfg.sync_overhead is None:
                self.balancer.set_sync_overhead(self.probe_sync_overhead())
        self._pending: dict[int, float] | None = None
        self._outcome: OpOutcome | None = None

    # -- cost of one split --

    def rail_times(self, size: int, alpha: Sequence[float]) -> dict[int, float]:
        out = {}
        segs = split_by_ratios(size, alpha)
        for m, seg, a in zip(self.models, segs, alpha):
            if a > 0 and seg.length > 0:
                out[m.rail_id] = m.latency(seg.length, self.nodes, seg.length / size, self.algorithm,
                                           self.fabric_nodes)
        return out

    def _noisy(self, value: float) -> float:
        if self.config.jitter <= 0:
            return value
        return value * max(0.0, 1.0 + self.config.jitter * self.rng.standard_normal())

    def probe_sync_overhead(self) -> float:
        """Split cost of a minimal operation, measured the way the live engine does."""
        probe = self.nodes * len(self.models) * 4
        even = [seg.length / probe for seg in split_even(probe, len(self.models))]
        dual = max(self.rail_times(probe, even).values()) + self.config.sync_overhead
        # against the slowest rail alone: the split always waits for it anyway
        single = max(m.op_latency(probe, self.nodes, self.algorithm) for m in self.models)
        return max(0.0, dual - single)

    def _slice_times(self, size: int) -> tuple[list, dict[int, float]]:
        """Fixed-size slices go to whichever rail frees up first."""
        c = self.config
        live = [m for m in self.models if m.rail_id not in self.down]
        n = max(1, -(-size // c.slice_size))
        sizes = [c.slice_size] * (n - 1) + [size - c.slice_size * (n - 1)]
        shares = {m.rail_id: 1.0 / len(live) for m in live}
        for _ in range(c.slice_passes):
            free = {m.rail_id: 0.0 for m in live}
            carried = {m.rail_id: 0 for m in live}
            for z in sizes:
                m = min(live, key=lambda r: (free[r.rail_id], r.rail_id))
                share = shares[m.rail_id] if len(live) > 1 else 1.0
                op = m.op_latency(z, self.nodes, self.algorithm, share, self.fabric_nodes)
                free[m.rail_id] += op + m.contention(op, share, self.nodes) + c.slice_metadata
                carried[m.rail_id] += z
            shares = {r: carried[r] / size for r in carried}
        alpha = [shares.get(r, 0.0) for r in self.rail_ids]
        return alpha, {r: t for r, t in free.items() if carried[r] > 0 or len(live) > 1}

    def choose(self, size: int) -> tuple[list, dict[int, float]]:
        if self.scheduler is Scheduler.SLICE:
            return self._slice_times(size)
        if self.scheduler is Scheduler.NEZHA:
            alloc = self.balancer.allocate(size)
            lengths = {r: seg.length for r, seg in alloc}
            alpha = [lengths.get(r, 0) / size for r in self.rail_ids]
        else:
            base = self.ratios or self._bandwidth_ratios()
            alive = np.array([r not in self.down for r in self.rail_ids], dtype=float)
            a = np.asarray(base) * alive
            alpha = [float(v) for v in a / a.sum()]
        return alpha, self.rail_times(size, alpha)

    def _bandwidth_ratios(self) -> list:
        bw = np.array([m.model_profile(self.nodes).bandwidth for m in self.models])
        return list(bw / bw.sum())

    # -- event handling --

    def _handle(self, ev: SimEvent) -> None:
        if ev.kind is EventKind.SEND_START:
            done = ev.timestamp + ev.data
            self.loop.push(SimEvent(done, ev.rank, ev.rail_id, EventKind.SEND_END, ev.op_seq))
            self.loop.push(SimEvent(done, ev.rank, ev.rail_id, EventKind.REDUCE_DONE, ev.op_seq))
        elif ev.kind is EventKind.REDUCE_DONE:
            self._pending.pop(ev.rail_id, None)
            if not self._pending:
                out = self._outcome
                end = ev.timestamp
                if len(out.rail_latency) > 1 or self.scheduler is Scheduler.SLICE and len(self.models) > 1:
                    end += self.config.sync_overhead
                out.end = end
                if self.balancer is not None:
                    ev_flush = self.balancer.record_operation(
                        out.size, out.rail_latency, out.latency, apply=False)
                    if ev_flush is not None:
                        self.loop.push(SimEvent(end, 0, -1, EventKind.FLUSH, out.op_seq, ev_flush))
        elif ev.kind is EventKind.FLUSH:
            self.balancer.apply_flush(ev.data)
        elif ev.kind is EventKind.FAIL:
            self.down.add(ev.rail_id)
            if self.balancer is not None:
                self.balancer.exclude(ev.rail_id)
        elif ev.kind is EventKind.READMIT:
            self.down.discard(ev.rail_id)
            if self.balancer is not None:
                self.balancer.readmit(ev.rail_id)

    def schedule_failure(self, rail_id: int, at: float, restore_at: float | None = None) -> None:
        if rail_id not in self.by_id:
            raise InvalidArgument(f"unknown rail {rail_id}")
        self.loop.push(SimEvent(at, 0, rail_id, EventKind.FAIL))
        if restore_at is not None:
            self.loop.push(SimEvent(restore_at, 0, rail_id, EventKind.READMIT))

    def run_op(self, size: int, start: float | None = None) -> OpOutcome:
        start = self.loop.now if start is None else max(start, self.loop.now)
        self.loop.run(self._handle, until=start)   # failures due before the op starts
        self.loop.now = start
        self.op_seq += 1
        alpha, times = self.choose(size)
        times = {r: self._noisy(t) for r, t in times.items()}
        self._outcome = OpOutcome(self.op_seq, size, start, start, alpha, times)
        self._pending = dict(times)
        for r in sorted(times):
            self.loop.push(SimEvent(start, 0, r, EventKind.SEND_START, self.op_seq, times[r]))
        self.loop.run(self._handle, stop=lambda: not self._pending)
        # let the flush (if any) land before the next op
        self.loop.run(self._handle, until=self._outcome.end)
        self.loop.now = max(self.loop.now, self._outcome.end)
        return self._outcome

    def settled(self, size: int) -> bool:
        if self.balancer is None:
            return True
        e = self.balancer.entry(size)
        return e.state is BucketState.COLD or e.converged


def simulate_allreduce(rails: Sequence, scheduler: Scheduler | str, nodes: int, size: int,
                       algorithm: Algorithm | str = Algorithm.RING, config: SimConfig | None = None,
                       ratios: Sequence[float] | None = None, iters: int | None = None,
                       warmup: int | None = None, record: bool = False,
                       balancer_config: BalancerConfig | None = None,
                       fabric_nodes: int | None = None, sim: Simulation | None = None) -> SimResult:
    """Mean per-operation latency (virtual µs) of ``size``-byte allreduces.

    With ``iters`` unset the adaptive scheduler runs until its table entry for
    this size settles, then one more window is averaged; the static
    schedulers need a single operation. With ``iters`` set, the first
    ``warmup`` operations (default min(100, iters - 1)) are excluded.
    """
    if size <= 0:
        raise InvalidArgument("size must be positive")
    sim = sim or Simulation(rails, nodes, scheduler, algorithm, config, ratios, balancer_config,
                            record, fabric_nodes)
    ops = []
    if iters is None:
        if sim.balancer is None:
            ops.append(sim.run_op(size))
            measured = ops
        else:
            window = sim.balancer.config.window
            limit = (sim.balancer.config.max_iters + 2) * window
            while not sim.settled(size) and len(ops) < limit:
                ops.append(sim.run_op(size))
            measured = [sim.run_op(size) for _ in range(window)]
            ops.extend(measured)
    else:
        if iters < 1:
            raise InvalidArgument("iters must be >= 1")
        skip = min(100, iters - 1) if warmup is None else min(warmup, iters - 1)
        ops = [sim.run_op(size) for _ in range(iters)]
        measured = ops[skip:]
    lat = float(np.mean([o.latency for o in measured]))
    last = measured[-1]
    state = "hot" if sum(1 for a in last.alpha if a > 0) > 1 else "cold"
    return SimResult(sim.scheduler, nodes, size, sim.algorithm, lat, list(last.alpha), state, ops,
                     sim.loop.trace, sim.balancer)


def single_rail_latency(rail, nodes: int, size: int, algorithm: Algorithm | str = Algorithm.RING,
                        config: SimConfig | None = None, fabric_nodes: int | None = None) -> float:
    m = RailModel(rail, config)
    return m.op_latency(size, nodes, Algorithm.parse(algorithm), 1.0, fabric_nodes)


@dataclass
class FailureTrace:
    times: np.ndarray                 # sample start, seconds
    throughput: dict                  # rail_id -> bytes/s per sample
    outages: list
    period_us: float
    alpha_before: list
    alpha_after: list


def simulate_failure_trace(rails: Sequence, outages: Sequence[tuple[int, float, float]], nodes: int = 4,
                           payload: int = 8 << 20, duration: float = 240.0, sample: float = 1.0,
                           period_us: float | None = None, readmit_after: float = 1.0,
                           config: SimConfig | None = None) -> FailureTrace:
    """Per-rail throughput under a steady offered load with rail outages.

    One ``payload``-byte allreduce starts every ``period_us``; each outage
    ``(rail_id, start_s, end_s)`` removes a rail and readmits it
    ``readmit_after`` seconds after the outage ends. The balancer is
    converged before the trace starts, so readmission restores its split.
    """
    sim = Simulation(rails, nodes, Scheduler.NEZHA, Algorithm.RING, config)
    while not sim.settled(payload):
        sim.run_op(payload)
    alpha_before = list(sim.run_op(payload).alpha)
    if period_us is None:
        worst = max(m.op_latency(payload, nodes) for m in sim.models)
        period_us = 1.25 * worst
    t0 = sim.loop.now
    for rail, start, end in outages:
        sim.schedule_failure(rail, t0 + start * 1e6, t0 + (end + readmit_after) * 1e6)
    bins = int(math.ceil(duration / sample))
    carried = {r: np.zeros(bins) for r in sim.rail_ids}
    k = 0
    while True:
        start = t0 + k * period_us
        rel = (start - t0) / 1e6
        if rel >= duration:
            break
        out = sim.run_op(payload, start)
        b = int(rel // sample)
        for r, seg in zip(sim.rail_ids, split_by_ratios(payload, out.alpha)):
            carried[r][b] += seg.length
        k += 1
    return FailureTrace(np.arange(bins) * sample, {r: v / sample for r, v in carried.items()},
                        list(outages), period_us, alpha_before, list(out.alpha))
