"""Run one callable per rank, each in its own thread with its own context."""
from __future__ import annotations

import dataclasses
import threading
from typing import Callable, Sequence

from .balancer import Balancer, BalancerConfig
from .core import RailProfile
from .schedulers import make_policy
from .engine import ContextConfig, MultiRailContext
from .transport import InMemoryTransport, Transport


class RankError(RuntimeError):
    def __init__(self, errors: dict[int, BaseException]):
        rank, first = min(errors.items())
        super().__init__(f"{len(errors)} rank(s) failed; rank {rank}: {first!r}")
        self.errors = errors


def open_context(transport: Transport, rank: int, world_size: int, rails: Sequence[RailProfile],
                 config: ContextConfig | None = None, balancer_config: BalancerConfig | None = None,
                 table=None, pool=None, scheduler: str = "nezha") -> MultiRailContext:
    conns = transport.establish(rank, world_size, rails)
    # each rank mutates its own config (measured sync overhead)
    cfg = dataclasses.replace(balancer_config) if balancer_config else BalancerConfig()
    bal = Balancer.for_ring(conns.rails, world_size, cfg, table=table)
    return MultiRailContext(conns, bal, config, pool=pool, policy=make_policy(scheduler, bal))


def run_ranks(fn: Callable[[MultiRailContext], object], world_size: int, rails: Sequence[RailProfile],
              transport: Transport | None = None, config: ContextConfig | None = None,
              balancer_config: BalancerConfig | None = None, timeout: float | None = 600.0,
              close: bool = True, scheduler: str = "nezha", table_factory=None) -> list:
    """Start ``world_size`` ranks as threads and return ``fn(ctx)`` for each, in rank order.

    Any exception on any rank is re-raised as :class:`RankError` after all
    threads finish (or the timeout expires).
    """
    transport = transport or InMemoryTransport()
    results: list = [None] * world_size
    errors: dict[int, BaseException] = {}

    def body(rank):
        ctx = None
        try:
            table = table_factory(rank) if table_factory else None
            ctx = open_context(transport, rank, world_size, rails, config, balancer_config,
                               table=table, scheduler=scheduler)
            results[rank] = fn(ctx)
        except BaseException as exc:
            errors[rank] = exc
            if ctx is not None:
                ctx.close(graceful=False)  # also unblocks peers waiting on this rank
            return
        if ctx is not None and close:
            ctx.close()

    threads = [threading.Thread(target=body, args=(r,), daemon=True, name=f"rank{r}")
               for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    hung = [r for r, t in enumerate(threads) if t.is_alive()]
    for r in hung:
        errors.setdefault(r, TimeoutError(f"rank {r} did not finish"))
    if errors:
        raise RankError(errors)
    return results
