"""
How the scheduler divides a payload
===================================

A fast rail and a slow one. Small payloads go to the faster rail alone
(cold start), large ones are split so both rails finish together (hot
start), and very lopsided pairs are never split at all.
"""

import numpy as np

from multirail import Balancer, BalancerConfig, ProtocolKind, RailProfile
from multirail.balancer import efficiency_ratio, find_threshold

fast = RailProfile(0, ProtocolKind.TCP, t_setup=100.0, bandwidth=3e9)
slow = RailProfile(1, ProtocolKind.TCP, t_setup=300.0, bandwidth=1e9)
rails = [fast, slow]

# %%
# The split only pays for itself once the payload is big enough to
# amortize the extra synchronization.
threshold = find_threshold(rails, sync_overhead=400.0)
print(f"split threshold: {threshold / 1024:.0f} KB")

# %%
# The balancer learns coefficients from measured latencies. Here the
# "measurement" is the profile's own model, so it converges to the split
# that makes both rails finish at the same time.
bal = Balancer(rails, BalancerConfig(sync_overhead=400.0))
payload = 64 << 20


def measure(alpha):
    return {r.rail_id: r.latency(a * payload) for r, a in zip(rails, alpha) if a > 0}


entry = bal.converge(payload, measure)
print(f"64 MB: alpha={np.round(entry.alpha, 3)} after {bal.flushes} updates, state={entry.state.value}")
for size in (4 << 10, 256 << 10, 4 << 20, 64 << 20):
    alloc = bal.allocate(size)
    print(f"{size >> 10:>6} KB ->", [(rail, seg.length) for rail, seg in alloc])

# %%
# A rail five times slower (in throughput) than its sibling is never used
# for a split: the gain would not cover the coordination cost.
lopsided = [fast, RailProfile(1, ProtocolKind.TCP, 300.0, 0.5e9)]
rho = efficiency_ratio(lopsided, [0.5, 0.5], 64 << 20)
print(f"throughput ratio {rho:.1f}:", Balancer(lopsided).allocate(64 << 20))
