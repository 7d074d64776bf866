"""
Virtual-time experiments
========================

The simulator replays the same scheduling logic against rail models, so
cluster-scale questions can be asked on a laptop. It is deterministic:
the same inputs give the same microseconds every time.
"""

from multirail.collective import Algorithm
from multirail.simnet import SimConfig, reference_rails, simulate_allreduce, simulate_failure_trace, single_rail_latency
from multirail.simnet.calibration import TCP_SAMPLES, calibrate
from multirail.simnet.workload import GPT_30B, efficiency_ratio

# %%
# Rails calibrated from measured latencies of a TCP and a SHARP network at
# four nodes; compare fixed splits with the adaptive scheduler.
tcp, sharp = reference_rails()
print(f"{'size':>8} {'tcp':>9} {'sharp':>9} {'50/50':>9} {'adaptive':>9}")
for size in (1 << 10, 8 << 20, 64 << 20):
    t = single_rail_latency(tcp, 4, size)
    s = single_rail_latency(sharp, 4, size)
    even = simulate_allreduce([tcp, sharp], "fixed", 4, size, ratios=[0.5, 0.5]).latency_us
    ada = simulate_allreduce([tcp, sharp], "nezha", 4, size).latency_us
    print(f"{size:>8} {t:9.0f} {s:9.0f} {even:9.0f} {ada:9.0f}")

# %%
# Two identical TCP rails: one goes away for a minute and comes back.
pair = [calibrate(TCP_SAMPLES, 0), calibrate(TCP_SAMPLES, 1)]
trace = simulate_failure_trace(pair, [(1, 60, 120)], duration=180, sample=10)
for t, a, b in zip(trace.times, trace.throughput[0], trace.throughput[1]):
    print(f"t={t:5.0f}s  rail0 {a / 1e6:7.1f} MB/s  rail1 {b / 1e6:7.1f} MB/s")

# %%
# Training-iteration model: a 30B-parameter model on 128 nodes with one
# or two throttled gigabit rails.
for congestion in (False, True):
    ratio, single, dual = efficiency_ratio(GPT_30B, 128, Algorithm.RING, SimConfig(congestion=congestion))
    print(f"congestion {'on ' if congestion else 'off'}: single {single.total_s:.2f} s, "
          f"dual {dual.total_s:.2f} s, speedup {ratio:.2f}x")
