"""Multi-rail allreduce: split one collective across several network rails.

Typical use::

    import numpy as np
    from multirail import run_ranks, RailProfile

    rails = [RailProfile(0, "tcp", 200.0, 100e6), RailProfile(1, "tcp", 200.0, 100e6)]
    sums = run_ranks(lambda ctx: ctx.allreduce(np.ones(1 << 20, np.float32)), 4, rails)
"""
from .balancer import (AllocationTable, Balancer, BalancerConfig, BucketState, ComputePool, Phase, cold_latency,
                       efficiency_ratio, find_threshold, gate_open, hot_latency, init_coefficients,
                       update_coefficients)
from .collective import Algorithm, reference_allreduce, split_oversized
from .core import (InvalidArgument, ProtocolKind, RailProfile, ReduceOp, Segment, SizeBucket, network_efficiency,
                   ring_volume, size_bucket)
from .engine import ContextConfig, MultiRailContext
from .faults import Health, ReadmitRejected, UnrecoverableFailure
from .launch import RankError, open_context, run_ranks
from .transport import InMemoryTransport, SocketTransport, in_memory_transport, shaped_transport

__version__ = "0.1.0"

__all__ = [
    "Algorithm", "AllocationTable", "Balancer", "BalancerConfig", "BucketState", "ComputePool", "ContextConfig",
    "Health", "InMemoryTransport", "InvalidArgument", "MultiRailContext", "Phase", "ProtocolKind", "RailProfile",
    "RankError", "ReadmitRejected", "ReduceOp", "Segment", "SizeBucket", "SocketTransport", "UnrecoverableFailure",
    "cold_latency", "efficiency_ratio", "find_threshold", "gate_open", "hot_latency", "in_memory_transport",
    "init_coefficients", "network_efficiency", "open_context", "reference_allreduce", "ring_volume", "run_ranks",
    "shaped_transport", "size_bucket", "split_oversized", "update_coefficients",
]
