"""One randomized single-rail failure during a dual-rail allreduce.

Shared by the fault tests and the acceptance suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from multirail.collective import Algorithm
from multirail.core import ProtocolKind, RailProfile
from multirail.engine import ContextConfig
from multirail.launch import run_ranks
from multirail.transport import InMemoryTransport

from oracles import direct_sum, rel_err


@dataclass
class Trial:
    ok: bool
    err: float
    delays: list            # seconds from Failed to resume, one per ticket on any rank
    tickets: int
    failed_rail: int


def frames_per_op(n, seg_bytes, mfp, chunks=1):
    block = seg_bytes / n / chunks
    return 2 * (n - 1) * chunks * max(1, math.ceil(block / mfp))


def failover_trial(seed: int, transport=None, world: int = 3, elems: int = 1 << 16,
                   rails=None, heartbeat: float | None = 0.05, chunk_size: int | None = None) -> Trial:
    rng = np.random.default_rng(seed)
    rails = rails or [RailProfile(0, ProtocolKind.TCP, 10, 1e9, max_frame_payload=16 * 1024),
                      RailProfile(1, ProtocolKind.TCP, 10, 1e9, max_frame_payload=16 * 1024)]
    algorithm = Algorithm.RING_CHUNKED if rng.random() < 0.5 else Algorithm.RING
    cfg = ContextConfig(algorithm=algorithm, chunk_size=chunk_size or 16 * 1024, heartbeat_interval=heartbeat,
                        measure_sync=False, recv_timeout=30)
    inputs = [rng.standard_normal(elems).astype(np.float32) for _ in range(world)]
    want = direct_sum(inputs)
    fail_rank = int(rng.integers(world))
    fail_rail = int(rng.integers(2))
    peer = (fail_rank + 1) % world
    seg = elems * 4 // 2
    chunks = 1 if algorithm is Algorithm.RING else max(1, seg // cfg.chunk_size)
    total = frames_per_op(world, seg, rails[fail_rail].max_frame_payload, chunks) // 2
    at = int(rng.integers(1, max(2, total) + 1))

    def body(ctx):
        if ctx.rank == fail_rank:
            ch = ctx.conns.channel(fail_rail, peer)
            if hasattr(ch, "inject_close"):
                ch.inject_close(ch.frames_sent + at)
            else:
                _arm_socket_close(ch, ch.frames_sent + at)
        x = inputs[ctx.rank].copy()
        ctx.allreduce(x)
        # a second operation shows the survivor carries on alone
        y = inputs[ctx.rank].copy()
        ctx.allreduce(y)
        return x, y, list(ctx.tickets)

    out = run_ranks(body, world, rails, transport or InMemoryTransport(), cfg, scheduler="fixed", timeout=120)
    err = max(max(rel_err(x, want), rel_err(y, want)) for x, y, _ in out)
    tickets = [t for _, _, ts in out for t in ts]
    delays = [t.resume_delay for t in tickets if t.resume_delay is not None]
    return Trial(err <= 1e-5, err, delays, len(tickets), fail_rail)


def _arm_socket_close(ch, at_frame):
    """Socket channels have no frame hook; wrap send to close abruptly at ``at_frame``."""
    orig = ch.send

    def send(frame):
        if ch.frames_sent + 1 >= at_frame:
            ch.send = orig
            ch.close()
        return orig(frame)

    ch.send = send
