"""Data-parallel training iteration model for large transformer runs."""
from __future__ import annotations

from dataclasses import dataclass

from ..collective import Algorithm, split_oversized
from ..core import ProtocolKind, RailProfile
from .model import SimConfig
from .run import Simulation, simulate_allreduce


@dataclass(frozen=True)
class ModelSpec:
    name: str
    params: float
    seq_len: int = 2048


@dataclass(frozen=True)
class ParallelSetup:
    tp: int
    dp: int
    pp: int
    batch: int


GPT_2_7B = ModelSpec("gpt-2.7b", 2.7e9)
GPT_30B = ModelSpec("gpt-30b", 30e9)

# nodes -> layout; two GPUs per node
SETUPS = {
    16: ParallelSetup(2, 2, 8, 128),
    32: ParallelSetup(2, 4, 8, 512),
    64: ParallelSetup(2, 8, 8, 512),
    128: ParallelSetup(2, 16, 8, 512),
}

GPUS_PER_NODE = 2
GRAD_BYTES = 4


def gigabit_rail(rail_id: int, t_setup: float = 100.0, gbps: float = 1.0, efficiency: float = 0.94,
                 cpu_sensitivity: float = 0.02) -> RailProfile:
    """A throttled Ethernet rail: ``gbps`` line rate at ``efficiency`` goodput.

    At this rate the host is mostly idle, so a sibling rail costs it far
    less CPU time than on a fast link.
    """
    return RailProfile(rail_id, ProtocolKind.TCP, t_setup, gbps * 1e9 / 8 * efficiency,
                       cpu_sensitivity=cpu_sensitivity)


@dataclass
class Iteration:
    nodes: int
    rails: int
    algorithm: Algorithm
    forward_s: float
    backward_s: float
    comm_s: float

    @property
    def total_s(self) -> float:
        # gradient allreduce overlaps the backward pass, not the forward one
        return self.forward_s + max(self.backward_s, self.comm_s)


def compute_time(model: ModelSpec, setup: ParallelSetup, nodes: int, tflops: float = 50.0) -> float:
    """Seconds of forward plus backward math per GPU per iteration (6 P tokens flops)."""
    flops = 6.0 * model.params * setup.batch * model.seq_len / (nodes * GPUS_PER_NODE)
    return flops / (tflops * 1e12)


def iteration_time(model: ModelSpec, nodes: int, rails, algorithm: Algorithm | str = Algorithm.RING,
                   config: SimConfig | None = None, tflops: float = 50.0) -> Iteration:
    """One training iteration: the data-parallel gradient allreduce runs over
    ``dp`` ranks through the adaptive scheduler on ``rails``; every node of the
    fabric is in some ring at once, which is what the congestion term sees."""
    setup = SETUPS[nodes]
    algorithm = Algorithm.parse(algorithm)
    grad = int(model.params * GRAD_BYTES / (setup.tp * setup.pp))
    grad -= grad % 4
    comp = compute_time(model, setup, nodes, tflops)
    sim = Simulation(rails, setup.dp, "nezha", algorithm, config, fabric_nodes=nodes)
    comm_us = 0.0
    for packet in split_oversized(grad):
        comm_us += simulate_allreduce(rails, "nezha", setup.dp, packet.length, algorithm, sim=sim).latency_us
    return Iteration(nodes, len(rails), algorithm, comp / 3, 2 * comp / 3, comm_us / 1e6)


def efficiency_ratio(model: ModelSpec, nodes: int, algorithm: Algorithm | str = Algorithm.RING,
                     config: SimConfig | None = None, tflops: float = 50.0) -> tuple[float, Iteration, Iteration]:
    """Single-rail iteration time over dual-rail iteration time."""
    single = iteration_time(model, nodes, [gigabit_rail(0)], algorithm, config, tflops)
    dual = iteration_time(model, nodes, [gigabit_rail(0), gigabit_rail(1)], algorithm, config, tflops)
    return single.total_s / dual.total_s, single, dual
