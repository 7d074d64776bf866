"""Live benchmark: repeated allreduces per size, one context per rank."""
from __future__ import annotations

import logging
import os
import subprocess
import sys
import tempfile
import threading
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..balancer import AllocationTable
from ..collective import Algorithm
from ..engine import ContextConfig, MultiRailContext
from ..launch import open_context, run_ranks
from ..simnet.model import SimConfig, models_for
from ..transport import ENV_DIR, FileStore, InMemoryTransport, SocketTransport
from .records import BenchConfig, BenchRecord, HEADER

log = logging.getLogger(__name__)


class BenchError(RuntimeError):
    pass


class ModelClock:
    """Virtual clock for live runs: per-rail times come from the simulator's
    rail models for the bytes each rail actually carried, so repeated runs
    produce identical timings and identical balancer decisions."""

    def __init__(self, rails, world_size: int, algorithm: Algorithm = Algorithm.RING,
                 config: SimConfig | None = None):
        self.config = config or SimConfig()
        self.models = {m.rail_id: m for m in models_for(rails, self.config)}
        self.nodes = world_size
        self.algorithm = algorithm

    def __call__(self, allocation, payload: int):
        per_rail = defaultdict(list)
        for rail, seg in allocation:
            per_rail[rail].append(seg.length)
        rail_lat = {}
        for rail, lengths in per_rail.items():
            m = self.models[rail]
            share = sum(lengths) / payload if len(per_rail) > 1 else 1.0
            rail_lat[rail] = sum(m.latency(n, self.nodes, share, self.algorithm) for n in lengths)
        op = max(rail_lat.values())
        if len(per_rail) > 1:
            op += self.config.sync_overhead
        return rail_lat, op


def rail_label(profiles) -> str:
    return "+".join(p.protocol_kind.value for p in profiles)


def _pattern(n: int, seed: int, size: int) -> np.ndarray:
    # small integers keep every partial sum exact in float32
    rng = np.random.default_rng([seed, size])
    return rng.integers(-8, 9, n).astype(np.float32)


def bench_rank(ctx: MultiRailContext, cfg: BenchConfig) -> list[BenchRecord]:
    """Body run by every rank; all ranks return the same records."""
    n_ranks = ctx.world_size
    skip = min(cfg.warmup, cfg.iters - 1)
    timers = [threading.Timer(f.at_ms / 1000, ctx.inject_failure, (f.rail_id,))
              for f in cfg.failures if f.rank == ctx.rank]
    for t in timers:
        t.daemon = True
        t.start()
    label = rail_label(ctx.profiles.values())
    records = []
    try:
        for size in cfg.sizes:
            base = _pattern(size // 4, cfg.seed, size)
            mine = base * np.float32(ctx.rank + 1)
            expected = base * np.float32(n_ranks * (n_ranks + 1) // 2)
            x = np.empty_like(mine)
            lats, sent0 = [], 0
            for i in range(cfg.iters):
                if i == skip:
                    sent0 = ctx.bytes_sent()
                np.copyto(x, mine)
                before = len(ctx.history)
                ctx.allreduce(x)
                lat = sum(r.latency_us for r in ctx.history[before:])
                del ctx.history[:]
                if not np.array_equal(x, expected):
                    bad = int(np.flatnonzero(x != expected)[0])
                    raise BenchError(f"rank {ctx.rank}: wrong sum at element {bad} (size {size}, op {i})")
                if i >= skip:
                    lats.append(lat)
            sent = (ctx.bytes_sent() - sent0) / len(lats)
            mean = float(ctx.agree_mean([float(np.mean(lats))])[0])
            alloc = ctx.policy.allocate(size)
            carried = defaultdict(int)
            for r, seg in alloc:
                carried[r] += seg.length
            state = "hot" if len(carried) > 1 else "cold"
            alpha = [carried.get(r, 0) / size for r in ctx.rail_ids]
            records.append(BenchRecord(size, mean, alpha, state, sent,
                                       cfg.scheduler, label, n_ranks, cfg.algorithm.value, cfg.transport,
                                       cfg.clock))
    finally:
        for t in timers:
            t.cancel()
    if cfg.balancer_state and ctx.rank == 0:
        ctx.balancer.table.save(cfg.balancer_state)
    return records


def _context_config(cfg: BenchConfig, specs) -> ContextConfig:
    clock = ModelClock(specs, cfg.world_size, cfg.algorithm) if cfg.clock == "virtual" else None
    return ContextConfig(algorithm=cfg.algorithm, latency_model=clock)


def _table(cfg: BenchConfig, profiles, world_size):
    if cfg.balancer_state and Path(cfg.balancer_state).exists():
        return AllocationTable.load(cfg.balancer_state, [p.rail_id for p in profiles])
    return None


def run_benchmark(cfg: BenchConfig, rank: int | None = None, namespace: str = "") -> list[BenchRecord]:
    """Run the sweep and return rank 0's records.

    In memory, all ranks run as threads of this process. Over shaped
    sockets, ``rank`` selects the single rank this process plays (peers
    meet through ``NEZHA_RENDEZVOUS_DIR``); with ``rank`` unset every rank
    runs as a thread here, over real loopback sockets.
    """
    specs = cfg.rail_specs()
    profiles = cfg.profiles()
    ccfg = _context_config(cfg, specs)
    table_factory = (lambda r: _table(cfg, profiles, cfg.world_size)) if cfg.balancer_state else None
    if cfg.transport == "inmem" or rank is None:
        transport = InMemoryTransport() if cfg.transport == "inmem" else SocketTransport(
            FileStore(tempfile.mkdtemp(prefix="nezha-")))
        results = run_ranks(lambda ctx: bench_rank(ctx, cfg), cfg.world_size, profiles, transport, ccfg,
                            scheduler=cfg.scheduler, table_factory=table_factory, timeout=None)
        records = results[0]
    else:
        transport = SocketTransport(FileStore(), namespace=namespace)
        ctx = open_context(transport, rank, cfg.world_size, profiles, ccfg,
                           table=table_factory(rank) if table_factory else None, scheduler=cfg.scheduler)
        try:
            records = bench_rank(ctx, cfg)
        except BaseException:
            ctx.close(graceful=False)
            raise
        ctx.close()
        if rank != 0:
            return records
    if cfg.output:
        write_records(records, cfg.output)
    return records


def write_records(records, path) -> None:
    from ..simnet.scenario import write_csv
    write_csv(HEADER, [r.row() for r in records], path)


def spawn_ranks(argv: list[str], world_size: int, timeout: float | None = None) -> int:
    """Start one process per rank of ``nezha-bench`` sharing a fresh rendezvous directory.

    Returns the first nonzero exit code, or 0.
    """
    env = dict(os.environ)
    env[ENV_DIR] = tempfile.mkdtemp(prefix="nezha-")
    procs = [subprocess.Popen([sys.executable, "-m", "multirail.bench.cli", *argv, "--rank", str(r)], env=env)
             for r in range(world_size)]
    codes = []
    deadline = None if timeout is None else time.monotonic() + timeout
    for p in procs:
        try:
            left = None if deadline is None else max(0.1, deadline - time.monotonic())
            codes.append(p.wait(left))
        except subprocess.TimeoutExpired:
            for q in procs:
                q.kill()
            return 124
    bad = [c for c in codes if c]
    return bad[0] if bad else 0
