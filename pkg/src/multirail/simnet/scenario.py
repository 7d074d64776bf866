"""TOML scenario files for the simulator and their CSV output.

A scenario names its rails (synthetic or calibrated), the node count, a
size sweep, the schedulers to compare and optional outages::

    name = "tcp-sharp"
    nodes = 4
    sizes = ["1KB", "8MB", "64MB"]        # or "2KB:64MB"
    schedulers = ["nezha", "fixed", "slice"]
    algorithm = "ring"
    seed = 0

    [sim]                                 # any SimConfig field
    sync_overhead = 400.0

    [[rails]]
    protocol = "tcp"
    calibration = [["1KB", 982], ["8MB", 37137], ["64MB", 316323]]

    [[outages]]                           # switches to a throughput trace
    rail = 0
    start_s = 60
    end_s = 120
"""
from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from ..collective import Algorithm
from ..config import ConfigError, load_toml, parse_size, parse_sizes, rails_from_config
from .model import SimConfig
from .run import Scheduler, simulate_allreduce, simulate_failure_trace

SWEEP_HEADER = ["scenario", "size", "scheduler", "nodes", "algorithm", "latency_us", "throughput_Bps",
                "state", "alpha"]
TRACE_HEADER = ["scenario", "time_s", "rail_id", "throughput_Bps"]


@dataclass
class Scenario:
    name: str
    rails: list
    nodes: int = 4
    sizes: list = field(default_factory=lambda: parse_sizes("2KB:64MB"))
    schedulers: list = field(default_factory=lambda: [Scheduler.NEZHA])
    algorithm: Algorithm = Algorithm.RING
    seed: int = 0
    ratios: list | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    outages: list = field(default_factory=list)       # (rail, start_s, end_s)
    trace_duration: float = 240.0
    trace_payload: int = 8 << 20

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], default_name: str = "scenario") -> "Scenario":
        known = {"name", "rails", "nodes", "sizes", "schedulers", "scheduler", "algorithm", "seed", "ratios",
                 "sim", "outages", "duration_s", "payload"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        sizes = d.get("sizes", "2KB:64MB")
        sizes = parse_sizes(sizes) if isinstance(sizes, str) else [parse_size(s) for s in sizes]
        scheds = d.get("schedulers", d.get("scheduler", ["nezha"]))
        if isinstance(scheds, str):
            scheds = [scheds]
        seed = int(d.get("seed", 0))
        sim_fields = {f.name for f in dataclasses.fields(SimConfig)}
        sim_kw = dict(d.get("sim", {}))
        bad = set(sim_kw) - sim_fields
        if bad:
            raise ConfigError(f"unknown [sim] keys {sorted(bad)}")
        sim_kw.setdefault("seed", seed)
        outages = [(int(o["rail"]), float(o["start_s"]), float(o["end_s"])) for o in d.get("outages", [])]
        try:
            return cls(name=str(d.get("name", default_name)), rails=rails_from_config(d),
                       nodes=int(d.get("nodes", 4)), sizes=sizes,
                       schedulers=[Scheduler.parse(s) for s in scheds],
                       algorithm=Algorithm.parse(d.get("algorithm", "ring")), seed=seed,
                       ratios=d.get("ratios"), sim=SimConfig(**sim_kw), outages=outages,
                       trace_duration=float(d.get("duration_s", 240.0)),
                       trace_payload=parse_size(d.get("payload", 8 << 20)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario: {exc}") from None

    @classmethod
    def load(cls, path) -> "Scenario":
        from pathlib import Path
        return cls.from_dict(load_toml(path), Path(path).stem)


def _alpha_str(alpha: Sequence[float]) -> str:
    return ";".join(f"{a:.4f}" for a in alpha)


def run_scenario(sc: Scenario) -> tuple[list[str], list[list]]:
    """(header, rows). A scenario with outages yields a throughput trace."""
    if sc.outages:
        tr = simulate_failure_trace(sc.rails, sc.outages, sc.nodes, sc.trace_payload, sc.trace_duration,
                                    config=sc.sim)
        rows = [[sc.name, f"{t:g}", r, f"{tr.throughput[r][i]:.1f}"]
                for i, t in enumerate(tr.times) for r in sorted(tr.throughput)]
        return TRACE_HEADER, rows
    rows = []
    for size in sc.sizes:
        for sched in sc.schedulers:
            res = simulate_allreduce(sc.rails, sched, sc.nodes, size, sc.algorithm, sc.sim, ratios=sc.ratios)
            rows.append([sc.name, size, sched.value, sc.nodes, sc.algorithm.value, f"{res.latency_us:.3f}",
                         f"{res.throughput:.1f}", res.state, _alpha_str(res.alpha)])
    return SWEEP_HEADER, rows


def write_csv(header, rows, path=None) -> str:
    """Write to ``path`` (if given) and return the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
