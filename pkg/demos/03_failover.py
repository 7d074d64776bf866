"""
Losing a rail in the middle of an allreduce
===========================================

Rank 0's rail-1 link to rank 1 closes a few frames into the operation.
The chunks that rail had not finished move to rail 0, and the result is
still exact. The next operation runs on rail 0 alone.
"""

import numpy as np

from multirail import ContextConfig, InMemoryTransport, ProtocolKind, RailProfile, run_ranks

rails = [RailProfile(i, ProtocolKind.TCP, 10.0, 1e9, max_frame_payload=16 << 10) for i in range(2)]
world = 3
rng = np.random.default_rng(1)
inputs = [rng.standard_normal(1 << 16).astype(np.float32) for _ in range(world)]
expected = np.sum(inputs, axis=0, dtype=np.float64)


def body(ctx):
    if ctx.rank == 0:
        ch = ctx.conns.channel(1, 1)       # rail 1, towards rank 1
        ch.inject_close(ch.frames_sent + 3)
    x = inputs[ctx.rank].copy()
    ctx.allreduce(x)
    y = inputs[ctx.rank].copy()
    ctx.allreduce(y)
    return x, y, list(ctx.tickets), ctx.history[-1].allocation


out = run_ranks(body, world, rails, InMemoryTransport(), ContextConfig(heartbeat_interval=0.05),
                scheduler="fixed")

# %%
for rank, (x, y, tickets, alloc) in enumerate(out):
    ok = np.allclose(x, expected, rtol=1e-5, atol=1e-5) and np.allclose(y, expected, rtol=1e-5, atol=1e-5)
    moved = [(t.source_rail, t.target_rail, t.segment.length) for t in tickets]
    delay = max((t.resume_delay or 0.0) for t in tickets) if tickets else 0.0
    print(f"rank {rank}: exact={ok} handoffs={moved} worst resume {delay * 1e3:.1f} ms; "
          f"next op on rails {[r for r, _ in alloc]}")
