"""Canned simulator experiments: CSV data plus a matplotlib script per figure."""
from __future__ import annotations

from pathlib import Path

from ..collective import Algorithm
from ..config import ConfigError, parse_sizes
from ..core import InvalidArgument
from ..simnet import (SimConfig, calibrate, glex_rail, reference_rails, simulate_allreduce,
                      simulate_failure_trace)
from ..simnet.calibration import TCP_SAMPLES
from ..simnet.scenario import SWEEP_HEADER, TRACE_HEADER, write_csv
from ..simnet.workload import GPT_30B, SETUPS, efficiency_ratio

PRESETS = ("table1", "sweep-homogeneous", "sweep-heterogeneous", "failover-trace", "gpt-sim")
GPT_HEADER = ["model", "nodes", "algorithm", "congestion", "single_s", "dual_s", "ratio"]

TABLE1_SIZES = parse_sizes("1KB,8MB,64MB")
# column label -> (scheduler, TCP/SHARP ratios or None)
TABLE1_COLUMNS = {
    "sharp": ("fixed", [0.0, 1.0]),
    "tcp": ("fixed", [1.0, 0.0]),
    "1/1": ("fixed", [0.5, 0.5]),
    "99/1": ("fixed", [0.99, 0.01]),
    "1/99": ("fixed", [0.01, 0.99]),
    "slice": ("slice", None),
    "nezha": ("nezha", None),
}


class UnknownPreset(ConfigError):
    pass


def _row(name, size, label, nodes, res):
    return [name, size, label, nodes, res.algorithm.value, f"{res.latency_us:.3f}", f"{res.throughput:.1f}",
            res.state, ";".join(f"{a:.4f}" for a in res.alpha)]


def table1(quick: bool = False):
    rails = reference_rails()
    rows = []
    for size in TABLE1_SIZES:
        for label, (sched, ratios) in TABLE1_COLUMNS.items():
            res = simulate_allreduce(rails, sched, 4, size, ratios=ratios)
            rows.append(_row("table1", size, label, 4, res))
    return SWEEP_HEADER, rows


def _sweep(name, pairs, nodes_list, sizes, schedulers):
    rows = []
    for label, rails in pairs:
        for nodes in nodes_list:
            for size in sizes:
                for i, r in enumerate(rails):
                    ratios = [1.0 if j == i else 0.0 for j in range(len(rails))]
                    res = simulate_allreduce(rails, "fixed", nodes, size, ratios=ratios)
                    rows.append(_row(label, size, f"single-{r.profile.protocol_kind.value}{i}", nodes, res))
                for s in schedulers:
                    rows.append(_row(label, size, s, nodes, simulate_allreduce(rails, s, nodes, size)))
    return SWEEP_HEADER, rows


def sweep_homogeneous(quick: bool = False):
    tcp = [calibrate(TCP_SAMPLES, 0), calibrate(TCP_SAMPLES, 1)]
    sizes = parse_sizes("2KB:64MB")[::3 if quick else 1]
    return _sweep("tcp-tcp", [("tcp-tcp", tcp)], (4, 8), sizes, ["nezha"])


def sweep_heterogeneous(quick: bool = False):
    tcp, sharp = reference_rails()
    pairs = [("tcp-sharp", [tcp, sharp]), ("tcp-glex", [tcp, glex_rail(1)])]
    sizes = parse_sizes("2KB:64MB")[::3 if quick else 1]
    return _sweep("hetero", pairs, (4,) if quick else (4, 8), sizes, ["nezha", "fixed", "slice"])


def failover_trace(quick: bool = False):
    tcp = [calibrate(TCP_SAMPLES, 0), calibrate(TCP_SAMPLES, 1)]
    duration = 120.0 if quick else 240.0
    outages = [(0, duration / 4, duration / 2), (1, 0.65 * duration, 0.8 * duration)]
    tr = simulate_failure_trace(tcp, outages, duration=duration)
    rows = [["failover-trace", f"{t:g}", r, f"{tr.throughput[r][i]:.1f}"]
            for i, t in enumerate(tr.times) for r in sorted(tr.throughput)]
    return TRACE_HEADER, rows


def gpt_sim(quick: bool = False):
    rows = []
    for congestion in (False, True):
        cfg = SimConfig(congestion=congestion)
        for alg in Algorithm:
            for nodes in ((128,) if quick else sorted(SETUPS)):
                ratio, single, dual = efficiency_ratio(GPT_30B, nodes, alg, cfg)
                rows.append([GPT_30B.name, nodes, alg.value, "on" if congestion else "off",
                             f"{single.total_s:.4f}", f"{dual.total_s:.4f}", f"{ratio:.4f}"])
    return GPT_HEADER, rows


_RUNNERS = {"table1": table1, "sweep-homogeneous": sweep_homogeneous, "sweep-heterogeneous": sweep_heterogeneous,
            "failover-trace": failover_trace, "gpt-sim": gpt_sim}


_PLOT_PRELUDE = '''"""Plot {csv}; run from the directory holding it."""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("{csv}")
rows = list(csv.DictReader(open(here)))
'''

_PLOT_BODIES = {
    "table1": '''
sizes = sorted({{int(r["size"]) for r in rows}})
cols = list(dict.fromkeys(r["scheduler"] for r in rows))
fig, axes = plt.subplots(1, len(sizes), figsize=(4 * len(sizes), 3.5))
for ax, s in zip(axes, sizes):
    lat = {{r["scheduler"]: float(r["latency_us"]) for r in rows if int(r["size"]) == s}}
    ax.bar(cols, [lat[c] for c in cols])
    ax.set_title(f"{{s}} B")
    ax.set_ylabel("latency (us)")
    ax.tick_params(axis="x", rotation=45)
''',
    "sweep": '''
groups = defaultdict(list)
for r in rows:
    groups[(r["scenario"], r["nodes"])].append(r)
fig, axes = plt.subplots(1, len(groups), figsize=(5 * len(groups), 3.5), squeeze=False)
for ax, ((scen, nodes), rs) in zip(axes[0], sorted(groups.items())):
    lines = defaultdict(list)
    for r in rs:
        lines[r["scheduler"]].append((int(r["size"]), float(r["throughput_Bps"]) / 1e6))
    for name, pts in lines.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=name,
                ls="--" if name.startswith("single") else "-")
    ax.set_xscale("log", base=2)
    ax.set_title(f"{{scen}}, {{nodes}} nodes")
    ax.set_xlabel("size (B)")
    ax.set_ylabel("throughput (MB/s)")
    ax.legend(fontsize=7)
''',
    "failover-trace": '''
series = defaultdict(list)
for r in rows:
    series[r["rail_id"]].append((float(r["time_s"]), float(r["throughput_Bps"]) / 1e6))
fig, ax = plt.subplots(figsize=(8, 3))
for rail, pts in sorted(series.items()):
    ax.step([p[0] for p in pts], [p[1] for p in pts], where="post", label=f"rail {{rail}}")
ax.set_xlabel("time (s)")
ax.set_ylabel("throughput (MB/s)")
ax.legend()
''',
    "gpt-sim": '''
fig, ax = plt.subplots(figsize=(6, 3.5))
lines = defaultdict(list)
for r in rows:
    lines[(r["algorithm"], r["congestion"])].append((int(r["nodes"]), float(r["ratio"])))
for (alg, cong), pts in sorted(lines.items()):
    pts.sort()
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{{alg}}, congestion {{cong}}")
ax.axhline(2.0, color="grey", lw=0.8, ls=":")
ax.set_xscale("log", base=2)
ax.set_xlabel("nodes")
ax.set_ylabel("dual / single efficiency")
ax.legend(fontsize=7)
''',
}

_PLOT_TAIL = '''
fig.tight_layout()
fig.savefig(here.with_suffix(".png"), dpi=120)
print("wrote", here.with_suffix(".png"))
'''


def plot_script(name: str, csv_name: str) -> str:
    body = _PLOT_BODIES["sweep" if name.startswith("sweep") else name]
    return (_PLOT_PRELUDE + body + _PLOT_TAIL).format(csv=csv_name)


def run_preset(name: str, outdir=".", quick: bool = False) -> dict:
    """Run preset ``name``; writes ``<name>.csv`` and ``plot_<name>.py`` into ``outdir``."""
    if name not in _RUNNERS:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    header, rows = _RUNNERS[name](quick)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    plot_path = out / f"plot_{name.replace('-', '_')}.py"
    write_csv(header, rows, csv_path)
    plot_path.write_text(plot_script(name, csv_path.name))
    return {"csv": csv_path, "plot": plot_path, "header": header, "rows": rows}
