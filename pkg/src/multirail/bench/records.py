"""Benchmark configuration and the rows it produces."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..collective import Algorithm
from ..config import ConfigError, default_rails, live_profile, load_rails, parse_sizes

HEADER = ["size", "scheduler", "rails", "ranks", "algorithm", "transport", "clock", "latency_us",
          "throughput_Bps", "state", "alpha", "bytes_sent_per_rank"]

CI_ITERS = 1000
FULL_ITERS = 10000


@dataclass(frozen=True)
class FailureInjection:
    """Take ``rail_id`` down ``at_ms`` after the first timed size starts, on ``rank``."""
    rail_id: int
    at_ms: float
    rank: int = 0

    @classmethod
    def parse(cls, text: str, rank: int = 0) -> "FailureInjection":
        try:
            rail, at = text.split("@")
            return cls(int(rail), float(at.removesuffix("ms")), rank)
        except ValueError:
            raise ConfigError(f"bad failure spec {text!r}, expected <rail>@<ms>") from None


@dataclass
class BenchConfig:
    world_size: int = 2
    sizes: list = field(default_factory=lambda: parse_sizes("2KB:64MB"))
    iters: int = FULL_ITERS
    warmup: int = 100
    algorithm: Algorithm = Algorithm.RING
    rails: str | None = None              # TOML path; two shaped TCP rails if unset
    scheduler: str = "nezha"
    transport: str = "inmem"              # inmem | shaped
    output: str | None = None
    seed: int = 0
    failures: list = field(default_factory=list)
    balancer_state: str | None = None
    clock: str | None = None              # wall | virtual; virtual by default in memory

    def __post_init__(self):
        self.algorithm = Algorithm.parse(self.algorithm)
        if self.world_size < 2:
            raise ConfigError("need at least 2 ranks")
        if not self.sizes or any(s <= 0 or s % 4 for s in self.sizes):
            raise ConfigError("sizes must be positive multiples of 4 bytes")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if self.transport not in ("inmem", "shaped"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.clock is None:
            self.clock = "virtual" if self.transport == "inmem" else "wall"
        if self.clock not in ("wall", "virtual"):
            raise ConfigError(f"unknown clock {self.clock!r}")

    def rail_specs(self) -> list:
        """Rails as configured (calibrated profiles kept for the virtual clock)."""
        return load_rails(self.rails) if self.rails else default_rails()

    def profiles(self) -> list:
        return [live_profile(r) for r in self.rail_specs()]

    @property
    def measured_iters(self) -> int:
        return self.iters - min(self.warmup, self.iters - 1)


@dataclass
class BenchRecord:
    size: int
    latency_us: float
    alpha: list
    state: str
    bytes_sent: float
    scheduler: str = "nezha"
    rails: str = ""
    ranks: int = 2
    algorithm: str = "ring"
    transport: str = "inmem"
    clock: str = "virtual"

    @property
    def throughput(self) -> float:
        return self.size / (self.latency_us * 1e-6) if self.latency_us > 0 else float("inf")

    def row(self) -> list:
        return [self.size, self.scheduler, self.rails, self.ranks, self.algorithm, self.transport, self.clock,
                f"{self.latency_us:.3f}", f"{self.throughput:.1f}", self.state,
                ";".join(f"{a:.4f}" for a in self.alpha), f"{self.bytes_sent:.0f}"]
