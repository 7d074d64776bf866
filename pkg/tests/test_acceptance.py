"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (also
repeated in the terminal summary) and then asserts it.
"""
import math
import tempfile
import time

import numpy as np
import pytest

from multirail.balancer import Balancer, BalancerConfig, efficiency_ratio, gate_open
from multirail.collective import Algorithm
from multirail.core import ProtocolKind, RailProfile, ring_volume
from multirail.engine import ContextConfig
from multirail.launch import run_ranks
from multirail.simnet import (Simulation, SimConfig, calibrate, reference_rails, simulate_allreduce,
                              single_rail_latency)
from multirail.simnet.calibration import TCP_SAMPLES
from multirail.simnet.workload import GPT_30B, efficiency_ratio as gpt_ratio
from multirail.transport import FileStore, InMemoryTransport, SocketTransport

from failover import failover_trial
from oracles import grid_optimum, hot_time, rel_err

KB, MB = 1 << 10, 1 << 20
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS.append(line)
    print("\n" + line)
    assert ok, line


def tcp(i, t, b, **kw):
    return RailProfile(i, ProtocolKind.TCP, t, b, **kw)


def transport(kind, tmp):
    if kind == "inmem":
        return InMemoryTransport()
    return SocketTransport(FileStore(tempfile.mkdtemp(dir=tmp)), shaped=kind == "shaped")


def timed_allreduce(rails, size, world=2, iters=12, warmup=4, algorithm=Algorithm.RING, tmp=None):
    """Median wall time of one allreduce over shaped loopback sockets."""
    def body(ctx):
        x = np.ones(size // 4, np.float32)
        ts = []
        for _ in range(iters):
            ctx.barrier()
            t = time.perf_counter()
            ctx.allreduce(x)
            ts.append(time.perf_counter() - t)
        return float(np.median(ts[warmup:]))
    cfg = ContextConfig(algorithm=algorithm, heartbeat_interval=None)
    return max(run_ranks(body, world, rails, transport("shaped", tmp), cfg))


def case_input(seed, rank, elems):
    x = np.random.default_rng([int(seed), rank]).random(elems, dtype=np.float32)
    x *= 2
    x -= 1
    return x


# 1 -------------------------------------------------------------------------------------------

def test_criterion_1_correctness(tmp_path):
    rails = [tcp(0, 10, 2e9), tcp(1, 10, 2e9)]
    rng = np.random.default_rng(2024)
    sessions = [(k, n, a) for k in ("inmem", "socket", "shaped") for n in (2, 4, 8) for a in Algorithm]
    per = [1000 // len(sessions) + (i < 1000 % len(sessions)) for i in range(len(sessions))]
    start = time.perf_counter()
    cases = worst = 0.0
    failures = []
    for (kind, world, alg), count in zip(sessions, per):
        # sizes log-uniform from one float up to 64 MB; the largest size appears in every session
        elems = [int(math.exp(rng.uniform(0, math.log(16 * MB)))) for _ in range(count - 1)] + [16 * MB]
        seeds = rng.integers(1 << 31, size=count)

        published = [dict() for _ in elems]

        def body(ctx, elems=elems, seeds=seeds, world=world, published=published):
            errs = []
            for i, (e, s) in enumerate(zip(elems, seeds)):
                mine = case_input(s, ctx.rank, e)
                published[i][ctx.rank] = mine
                x = mine.copy()
                ctx.allreduce(x)      # cannot finish before every rank has published
                if ctx.rank == 0:
                    want = np.zeros(e, np.float64)
                    for r in range(world):
                        want += published[i][r]
                    errs.append(rel_err(x, want))
                    published[i] = None
            return errs

        cfg = ContextConfig(algorithm=alg, heartbeat_interval=None, measure_sync=False)
        errs = run_ranks(body, world, rails, transport(kind, tmp_path), cfg)[0]
        cases += len(errs)
        worst = max(worst, max(errs))
        failures += [(kind, world, alg.value, e) for e, err in zip(elems, errs) if err > 1e-5]
    took = time.perf_counter() - start
    report(1, not failures and cases == 1000 and took < 300,
           f"{int(cases)} cases, max rel err {worst:.2e}, {len(failures)} over 1e-5, {took:.0f} s (limit 300 s)")


# 2 -------------------------------------------------------------------------------------------

def test_criterion_2_volume():
    rails = [tcp(0, 10, 1e9), tcp(1, 10, 1e9)]
    worst = 0.0
    for world in (2, 4, 8):
        for size in (64 * KB, 8 * MB):
            def body(ctx, size=size):
                x = np.ones(size // 4, np.float32)
                before = ctx.bytes_sent()
                ctx.allreduce(x)
                return ctx.bytes_sent() - before
            cfg = ContextConfig(heartbeat_interval=None, measure_sync=False)
            for sent in run_ranks(body, world, rails, InMemoryTransport(), cfg):
                want = ring_volume(world, size)
                worst = max(worst, abs(sent - want) / want)
    report(2, worst <= 0.01, f"max deviation from 2(N-1)S/N is {worst:.4%} (limit 1%)")


# 3 -------------------------------------------------------------------------------------------

def test_criterion_3_convergence():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    gaps, flushes = [], []
    while len(gaps) < 20:
        count = 2 + len(gaps) % 2
        pairs = [(float(rng.uniform(5, 500)), float(rng.uniform(1e8, 1e10))) for _ in range(count)]
        size = float(rng.choice([1e6, 4e6, 16e6, 64e6]))
        prof = [tcp(i, t, b) for i, (t, b) in enumerate(pairs)]
        if not gate_open(prof, size):
            continue
        bal = Balancer(prof, BalancerConfig(sync_overhead=0.0))
        bal.converge(int(size), lambda a: {p.rail_id: p.latency(x * size) for p, x in zip(prof, a) if x > 0})
        best, _ = grid_optimum(pairs, size, step=0.001)
        gaps.append(hot_time(pairs, bal.entry(int(size)).alpha, size) / best - 1)
        flushes.append(bal.flushes)
    took = time.perf_counter() - start
    report(3, max(gaps) <= 0.05 and max(flushes) <= 100 and took < 60,
           f"20 profiles, worst gap {max(gaps):.3%} (limit 5%), most flushes {max(flushes)} (limit 100), "
           f"{took:.1f} s")


# 4 -------------------------------------------------------------------------------------------

def test_criterion_4_gate():
    rng = np.random.default_rng(4)
    wrong = 0
    for i in range(500):
        # without setup cost or sync the cold/hot threshold is zero, so only the gate decides;
        # with setup cost a split may still lose to one rail, but a closed gate must never split
        setup = 0.0 if i % 2 else 500.0
        prof = [tcp(0, float(rng.uniform(0, setup)), float(rng.uniform(1e7, 1e10))),
                tcp(1, float(rng.uniform(0, setup)), float(rng.uniform(1e7, 1e10)))]
        size = int(rng.choice([4 * KB, 64 * KB, MB, 16 * MB]))
        rho = efficiency_ratio(prof, [0.5, 0.5], size)
        used = {rail for rail, _ in Balancer(prof, BalancerConfig(sync_overhead=0.0)).allocate(size)}
        if rho > 5:
            wrong += len(used) != 1
        elif setup == 0.0:
            wrong += len(used) != 2
    # the boundary itself: exactly 5 splits, a hair above does not
    edge = [tcp(0, 0, 5e9), tcp(1, 0, 1e9)]
    above = [tcp(0, 0, 5.0005e9), tcp(1, 0, 1e9)]
    at_edge = {r for r, _ in Balancer(edge, BalancerConfig(sync_overhead=0.0)).allocate(MB)}
    over = {r for r, _ in Balancer(above, BalancerConfig(sync_overhead=0.0)).allocate(MB)}
    ok = wrong == 0 and len(at_edge) == 2 and len(over) == 1
    report(4, ok, f"500 random profiles, {wrong} misrouted; rho=5 splits: {len(at_edge) == 2}, "
                  f"rho>5 single rail: {len(over) == 1}")


# 5 -------------------------------------------------------------------------------------------

def test_criterion_5_failover(tmp_path):
    rails = [tcp(i, 50, 100e6, max_frame_payload=16 * KB) for i in range(2)]
    start = time.perf_counter()
    trials = [failover_trial(s, SocketTransport(FileStore(tmp_path / f"t{s}")), rails=rails, elems=1 << 15)
              for s in range(1000)]
    took = time.perf_counter() - start
    wrong = sum(not t.ok for t in trials)
    fast = sum(max(t.delays, default=0.0) <= 0.2 for t in trials)
    handed = sum(t.tickets > 0 for t in trials)
    worst = max(max(t.delays, default=0.0) for t in trials)
    report(5, wrong == 0 and fast >= 990 and took < 600,
           f"1000 trials ({handed} with handoff), {wrong} wrong results, {fast / 10:.1f}% resumed within 200 ms "
           f"(worst {worst * 1e3:.1f} ms), {took:.0f} s (limit 600 s)")


# 6 -------------------------------------------------------------------------------------------

# published latencies (µs) at 4 nodes; columns are % to TCP / % to SHARP
TABLE1 = {
    KB: {"sharp": 9, "tcp": 982, "1/1": 987, "99/1": 984, "1/99": 991, "slice": 1002},
    8 * MB: {"sharp": 22140, "tcp": 37137, "1/1": 21265, "99/1": 37141, "1/99": 23911, "slice": 31013},
    64 * MB: {"sharp": 181484, "tcp": 316323, "1/1": 178373, "99/1": 314913, "1/99": 188137, "slice": 257135},
}
SPLITS = {"1/1": [0.5, 0.5], "99/1": [0.99, 0.01], "1/99": [0.01, 0.99]}


def test_criterion_6_table_ordering():
    tcp_rail, sharp_rail = reference_rails()
    cal_err = max(max(tcp_rail.residuals()), max(sharp_rail.residuals()))
    rails = [tcp_rail, sharp_rail]
    flipped = []
    for size, row in TABLE1.items():
        sim = {}
        for col in row:
            if col in SPLITS:
                sim[col] = simulate_allreduce(rails, "fixed", 4, size, ratios=SPLITS[col]).latency_us
            elif col == "slice":
                sim[col] = simulate_allreduce(rails, "slice", 4, size).latency_us
            else:
                sim[col] = single_rail_latency(rails[col == "sharp"], 4, size)
        cols = list(row)
        for i, a in enumerate(cols):
            for b in cols[i + 1:]:
                if (row[a] < row[b]) != (sim[a] < sim[b]):
                    flipped.append((size, a, b))
    report(6, cal_err <= 0.10 and not flipped,
           f"calibration residual {cal_err:.2%} (limit 10%), {len(flipped)} of 45 pairwise orderings differ")


# 7 -------------------------------------------------------------------------------------------

def test_criterion_7_homogeneous_gain(tmp_path):
    shaped = {}
    for size in (1 * MB, 4 * MB, 16 * MB):
        single = timed_allreduce([tcp(0, 200, 50e6)], size, tmp=tmp_path)
        dual = timed_allreduce([tcp(0, 200, 50e6), tcp(1, 200, 50e6)], size, tmp=tmp_path)
        shaped[size] = single / dual - 1
    rails = [calibrate(TCP_SAMPLES, 0), calibrate(TCP_SAMPLES, 1)]
    peak = {}
    for nodes in (4, 8):
        gains = [single_rail_latency(rails[0], nodes, s) / simulate_allreduce(rails, "nezha", nodes, s).latency_us
                 - 1 for s in (MB << k for k in range(7))]
        peak[nodes] = max(gains)
    ok = min(shaped.values()) >= 0.5 and all(0.7 <= g <= 1.0 for g in peak.values())
    report(7, ok, "shaped gain " + ", ".join(f"{s // MB} MB {g:.0%}" for s, g in shaped.items())
           + " (need >= 50%); simulated peak gain " + ", ".join(f"{n} nodes {g:.0%}" for n, g in peak.items())
           + " (need 70%..100%)")


# 8 -------------------------------------------------------------------------------------------

def test_criterion_8_cold_start():
    rails = [calibrate(TCP_SAMPLES, 0), calibrate(TCP_SAMPLES, 1)]
    th = {n: Simulation(rails, n).balancer.threshold_all() for n in (4, 8, 16)}
    decreasing = th[4] > th[8] > th[16]
    worst = 0.0
    for n, t in th.items():
        for frac in (0.05, 0.25, 0.5, 0.9):
            s = max(4, int(t * frac) // 4 * 4)
            dual = simulate_allreduce(rails, "nezha", n, s).latency_us
            worst = max(worst, dual / min(single_rail_latency(r, n, s) for r in rails))
    report(8, decreasing and worst <= 1.05,
           "thresholds " + ", ".join(f"{n} nodes {t / KB:.0f} KB" for n, t in th.items())
           + f"; worst below-threshold ratio to best single rail {worst:.3f} (limit 1.05)")


# 9 -------------------------------------------------------------------------------------------

def test_criterion_9_chunked(tmp_path):
    rail = [tcp(0, 20_000, 200e6)]
    ring = timed_allreduce(rail, 64 * MB, iters=3, warmup=1, tmp=tmp_path)
    chunked = timed_allreduce(rail, 64 * MB, iters=3, warmup=1, algorithm=Algorithm.RING_CHUNKED, tmp=tmp_path)
    gain = 1 - chunked / ring
    report(9, gain >= 0.10, f"64 MB on a 20 ms setup rail: ring {ring * 1e3:.0f} ms, "
                            f"chunked {chunked * 1e3:.0f} ms, {gain:.1%} faster (need >= 10%)")


# 10 ------------------------------------------------------------------------------------------

def test_criterion_10_gpt_scaling():
    off = gpt_ratio(GPT_30B, 128, Algorithm.RING, SimConfig(congestion=False))[0]
    on = gpt_ratio(GPT_30B, 128, Algorithm.RING, SimConfig(congestion=True))[0]
    report(10, off >= 1.9 and on > 2.0,
           f"128-node efficiency ratio {off:.3f} without congestion (need >= 1.9), {on:.3f} with (need > 2.0); "
           "model-dependent, not wall clock")


# not reachable at desk scale ----------------------------------------------------------------

@pytest.mark.xfail(reason="loopback sockets and Python framing cost far more than 9 µs per allreduce",
                   strict=True)
def test_sharp_small_message_latency_on_loopback(tmp_path):
    sharp = [RailProfile(0, ProtocolKind.SHARP, 9 / 6, 0.73e9)]
    lat = timed_allreduce(sharp, KB, world=4, iters=50, warmup=10, tmp=tmp_path)
    assert lat * 1e6 <= 9 * 1.1
