"""Latency-driven allocation of payload bytes across rails.

Small payloads go whole to the single fastest rail ("cold"); large payloads
are split by coefficients alpha that are tuned until every rail finishes at
about the same time ("hot").
"""
from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import InvalidArgument, RailProfile, Segment, size_bucket, split_by_ratios

WINDOW = 100


class DegenerateProfile(InvalidArgument):
    pass


class InvalidTelemetry(InvalidArgument):
    pass


# --- latency model -----------------------------------------------------------

def _throughput(p: RailProfile, nbytes: float) -> float:
    """Real-time throughput of one rail for an ``nbytes`` share (bytes/µs)."""
    if nbytes <= 0:
        return 0.0
    lat = p.latency(nbytes)
    if lat <= 0:
        return math.inf
    return nbytes / lat


def efficiency_ratio(profiles: Sequence[RailProfile], split: Sequence[float] | None, payload: float) -> float:
    """Throughput ratio of the two fastest rails at their shares of ``payload``, oriented >= 1.

    A rail's real-time throughput is its share times its efficiency divided
    by its ideal transfer time, which reduces to share / (t_setup + share/B).
    """
    if len(profiles) < 2:
        raise InvalidArgument("need at least two rails")
    if payload <= 0:
        raise InvalidArgument("payload must be positive")
    if split is None:
        split = [1.0 / len(profiles)] * len(profiles)
    thr = sorted((_throughput(p, a * payload) for p, a in zip(profiles, split)), reverse=True)
    hi, lo = thr[0], thr[1]
    if lo <= 0 or not math.isfinite(lo):
        if lo == hi:
            return 1.0
        raise DegenerateProfile("rail with zero or infinite throughput")
    if not math.isfinite(hi):
        raise DegenerateProfile("rail with infinite throughput")
    return hi / lo


def gate_open(profiles: Sequence[RailProfile], payload: float, tau: float = 5.0) -> bool:
    """Splitting is allowed only while the fastest pair stays within ``tau`` of each other."""
    if len(profiles) < 2:
        return False
    return efficiency_ratio(profiles, None, payload) <= tau


def cold_latency(profiles: Sequence[RailProfile], payload: float) -> tuple[float, int]:
    """Best single-rail latency and its rail id (ties go to the lowest id)."""
    if payload <= 0:
        raise InvalidArgument("payload must be positive")
    best = min(profiles, key=lambda p: (p.latency(payload), p.rail_id))
    return best.latency(payload), best.rail_id


def _check_simplex(alpha, n):
    a = np.asarray(alpha, dtype=float)
    if a.shape != (n,) or np.any(a < -1e-12) or abs(a.sum() - 1.0) > 1e-6:
        raise InvalidArgument(f"alpha {alpha} is not on the simplex")
    return np.clip(a, 0.0, None)


def hot_latency(profiles: Sequence[RailProfile], alpha: Sequence[float], payload: float,
                sync_overhead: float = 0.0) -> float:
    """Finish time of the slowest participating rail plus the coordination cost."""
    a = _check_simplex(alpha, len(profiles))
    lats = [p.latency(ai * payload) for p, ai in zip(profiles, a) if ai > 0]
    return max(lats) + sync_overhead


def rail_latencies(profiles: Sequence[RailProfile], alpha: Sequence[float], payload: float) -> np.ndarray:
    return np.array([p.latency(a * payload) if a > 0 else 0.0 for p, a in zip(profiles, alpha)])


def equal_finish_alpha(profiles: Sequence[RailProfile], payload: float) -> np.ndarray:
    """Split that equalizes t_i + alpha_i*S/B_i over the rails worth using (water filling)."""
    t = np.array([p.t_setup for p in profiles], dtype=float)
    b = np.array([min(p.bandwidth, 1e30) * 1e-6 for p in profiles])  # bytes/µs
    order = np.argsort(t, kind="stable")
    alpha = np.zeros(len(profiles))
    for k in range(len(order), 0, -1):
        idx = order[:k]
        level = (payload + np.sum(t[idx] * b[idx])) / np.sum(b[idx])
        if level > t[idx].max() or k == 1:
            alpha[idx] = (level - t[idx]) * b[idx] / payload
            break
    alpha = np.clip(alpha, 0.0, None)
    return alpha / alpha.sum()


def init_coefficients(latencies: Sequence[float]) -> np.ndarray:
    """Initial split from latencies measured under a uniform split.

    alpha_i = (T - T_i) / (T (R - 1)) with T the sum over the R rails, so
    slower rails start with proportionally less.
    """
    lat = np.asarray(latencies, dtype=float)
    if lat.ndim != 1 or len(lat) < 2:
        raise InvalidTelemetry("need latencies for at least two rails")
    if np.any(lat <= 0) or not np.all(np.isfinite(lat)):
        raise InvalidTelemetry(f"latencies must be positive, got {latencies}")
    total = lat.sum()
    return (total - lat) / (total * (len(lat) - 1))


def update_coefficients(alpha: Sequence[float], latencies: Sequence[float], *,
                        setups: Sequence[float] | None = None, slopes: Sequence[float] | None = None,
                        eta: float = 0.05, eps: float = 0.01) -> tuple[np.ndarray, bool]:
    """One projected subgradient step on max_i latency_i.

    The slowest participating rail gives up a share proportional to its
    normalized excess (capped at eta/2); the freed share goes to the faster
    rails in proportion to their headroom measured in alpha units, i.e.
    (L_max - L_i) / slope_i. ``setups``/``slopes`` come from the rail model
    (per-rail intercept and full-payload transfer time); without them the
    slope is estimated from the measurement itself. The result is clipped
    and renormalized, and moves at most eta in L1.

    Returns ``(alpha', converged)``; converged means all rails already
    finish within ``eps`` of each other and alpha is returned unchanged.
    """
    a = np.array(alpha, dtype=float)
    lat = np.asarray(latencies, dtype=float)
    n = len(a)
    if lat.shape != (n,):
        raise InvalidTelemetry("one latency per rail required")
    setups = np.zeros(n) if setups is None else np.asarray(setups, dtype=float)
    if slopes is None:
        slopes = np.where(a > 0, lat / np.maximum(a, 1e-12), np.inf)
        finite = slopes[np.isfinite(slopes)]
        slopes = np.where(np.isfinite(slopes), slopes, finite.mean() if finite.size else 1.0)
    slopes = np.maximum(np.asarray(slopes, dtype=float), 1e-12)

    part = a > 0
    if not part.any():
        raise InvalidArgument("alpha has no participating rail")
    m = int(np.argmax(np.where(part, lat, -np.inf)))
    lmax = lat[m]
    receivers = [i for i in range(n) if i != m and lat[i] < lmax]
    if not receivers:
        return a, True
    spread = lmax - min(lat[i] for i in receivers)
    if spread <= eps * lmax:
        return a, True
    variable = lmax - setups[m]
    excess = 1.0 if variable <= 0 else min(1.0, spread / variable)
    w = np.zeros(n)
    for i in receivers:
        w[i] = (lmax - lat[i]) / slopes[i]
    delta = min(a[m], 0.5 * eta * excess, w.sum())
    a[m] -= delta
    a += delta * w / w.sum()
    a = np.clip(a, 0.0, None)
    return a / a.sum(), False


def find_threshold(profiles: Sequence[RailProfile], alpha_for: Callable[[float], Sequence[float]] | None = None,
                   sync_overhead: float = 0.0, lo: float = 1.0, hi: float = float(1 << 40),
                   tau: float | None = None) -> float:
    """Payload size at which the split starts beating the best single rail.

    Bisection in log space on cold(S) - hot(S). Returns 0 when splitting
    wins everywhere in the range and +inf when it never does (including when
    the throughput gate stays closed).
    """
    if alpha_for is None:
        alpha_for = lambda s: equal_finish_alpha(profiles, s)

    def gain(s):
        if tau is not None and not gate_open(profiles, s, tau):
            return -math.inf
        return cold_latency(profiles, s)[0] - hot_latency(profiles, alpha_for(s), s, sync_overhead)

    grid = np.geomspace(lo, hi, 121)
    vals = [gain(s) for s in grid]
    if vals[0] >= 0:
        return 0.0
    for k in range(1, len(grid)):
        if vals[k] >= 0:
            a, b = math.log(grid[k - 1]), math.log(grid[k])
            for _ in range(100):
                mid = 0.5 * (a + b)
                if gain(math.exp(mid)) >= 0:
                    b = mid
                else:
                    a = mid
                if b - a < 1e-12:
                    break
            return math.exp(b)
    return math.inf


def ring_profile(profile: RailProfile, world_size: int) -> RailProfile:
    """Two-parameter model of a whole ring allreduce on one rail.

    A ring runs 2(N-1) steps, each moving S/N bytes, so the intercept is
    2(N-1) t_setup and the effective bandwidth B N / (2(N-1)). Interpolated
    profiles are first reduced to a least-squares line.
    """
    n = world_size
    if n < 2:
        raise InvalidArgument("ring needs at least 2 nodes")
    if profile.efficiency_points is not None:
        t, b = fit_line([(s, l) for s, l in profile.efficiency_points])
    else:
        t, b = profile.t_setup, profile.bandwidth
    return RailProfile(profile.rail_id, profile.protocol_kind, 2 * (n - 1) * t,
                       b * n / (2 * (n - 1)), None, profile.max_frame_payload, profile.cpu_sensitivity)


def fit_line(samples: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Relative least-squares fit latency = t + S/B; returns (t µs, B bytes/s).

    Falls back to the smallest-sample latency and the secant of the two
    largest samples when the unconstrained intercept comes out negative.
    """
    s = np.array([x for x, _ in samples], dtype=float)
    l = np.array([y for _, y in samples], dtype=float)
    if len(s) < 2:
        return float(l[0]), math.inf
    w = 1.0 / l
    A = np.stack([np.ones_like(s), s], axis=1) * w[:, None]
    (t, c), *_ = np.linalg.lstsq(A, l * w, rcond=None)
    if t < 0 or c <= 0:
        order = np.argsort(s)
        t = float(l[order[0]])
        c = (l[order[-1]] - l[order[-2]]) / (s[order[-1]] - s[order[-2]])
        c = max(c, 1e-12)
    return float(t), float(1e6 / c)


# --- telemetry ---------------------------------------------------------------

@dataclass
class LatencyWindow:
    """Rolling sample of up to ``capacity`` durations for one (rail, bucket)."""

    rail_id: int
    size_bucket: int
    capacity: int = WINDOW
    samples: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples)) if self.samples else math.nan

    def add(self, duration: float) -> float | None:
        """Append; on the ``capacity``-th sample return the mean and reset."""
        self.samples.append(float(duration))
        if len(self.samples) >= self.capacity:
            m = self.mean
            self.samples = []
            return m
        return None


@dataclass
class FlushEvent:
    size_bucket: int
    payload: int
    rail_means: dict            # rail_id -> mean µs (participating rails only)
    op_mean: float
    epoch: int = 0


# --- allocation table ----------------------------------------------------------

class BucketState(Enum):
    COLD = "cold"
    HOT = "hot"


@dataclass
class BucketEntry:
    state: BucketState
    best_rail: int
    alpha: list
    iters: int = 0
    converged: bool = False

    def to_json(self):
        return {"state": self.state.value, "best_rail": self.best_rail, "alpha": list(map(float, self.alpha)),
                "iters": self.iters, "converged": self.converged}

    @classmethod
    def from_json(cls, d):
        return cls(BucketState(d["state"]), int(d.get("best_rail", 0)), [float(x) for x in d["alpha"]],
                   int(d.get("iters", 0)), bool(d.get("converged", False)))


class AllocationTable:
    """Per size bucket: cold on one rail, or hot with a split alpha over all rails."""

    def __init__(self, rail_ids: Sequence[int]):
        self.rail_ids = list(rail_ids)
        self.entries: dict[int, BucketEntry] = {}

    def __contains__(self, bucket):
        return bucket in self.entries

    def __getitem__(self, bucket) -> BucketEntry:
        return self.entries[bucket]

    def unit(self, rail_id: int) -> list:
        return [1.0 if r == rail_id else 0.0 for r in self.rail_ids]

    def set_cold(self, bucket: int, rail_id: int) -> BucketEntry:
        e = BucketEntry(BucketState.COLD, rail_id, self.unit(rail_id), 0, True)
        self.entries[bucket] = e
        return e

    def set_hot(self, bucket: int, alpha: Sequence[float], iters: int = 0, converged: bool = False) -> BucketEntry:
        a = _check_simplex(alpha, len(self.rail_ids))
        best = self.rail_ids[int(np.argmax(a))]
        e = BucketEntry(BucketState.HOT, best, list(map(float, a)), iters, converged)
        self.entries[bucket] = e
        return e

    def nearest_hot(self, bucket: int) -> BucketEntry | None:
        hot = [(abs(b - bucket), b) for b, e in self.entries.items()
               if e.state is BucketState.HOT and e.converged]
        return self.entries[min(hot)[1]] if hot else None

    def to_json(self) -> dict:
        return {str(b): e.to_json() for b, e in sorted(self.entries.items())}

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
        os.replace(tmp, path)

    @classmethod
    def from_json(cls, data: Mapping, rail_ids: Sequence[int]) -> "AllocationTable":
        t = cls(rail_ids)
        for b, d in data.items():
            e = BucketEntry.from_json(d)
            if len(e.alpha) != len(t.rail_ids):
                raise InvalidArgument(f"bucket {b}: alpha has {len(e.alpha)} entries for {len(t.rail_ids)} rails")
            t.entries[int(b)] = e
        return t

    @classmethod
    def load(cls, path, rail_ids: Sequence[int]) -> "AllocationTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh), rail_ids)


# --- balancer ----------------------------------------------------------------

@dataclass
class BalancerConfig:
    tau: float = 5.0
    eta: float = 0.05
    sync_overhead: float | None = None      # µs; None until measured
    convergence_eps: float = 0.01
    max_iters: int = 100
    window: int = WINDOW

    def __post_init__(self):
        if not self.tau > 1:
            raise InvalidArgument("tau must be > 1")
        if not 0 < self.eta < 1:
            raise InvalidArgument("eta must be in (0, 1)")
        if self.window < 1:
            raise InvalidArgument("window must be >= 1")


class Balancer:
    """Allocation table plus the state machine that fills it.

    ``models`` are per-rail latency models of a whole single-rail operation
    (see :func:`ring_profile`); they drive the gate, the cold/hot threshold
    and the step sizes of the coefficient update. Measured latencies drive
    the updates themselves.

    Lifecycle of a bucket: gate closed or payload under the threshold gives
    Cold(best rail). Otherwise Hot starting from the nearest converged
    bucket's split, or from a uniform split whose first window seeds the
    initial coefficients. Each later window applies one update until the
    rails finish together or ``max_iters`` windows have passed.
    """

    def __init__(self, models: Sequence[RailProfile], config: BalancerConfig | None = None,
                 table: AllocationTable | None = None):
        if not models:
            raise InvalidArgument("need at least one rail")
        self.models = list(models)
        self.rail_ids = [m.rail_id for m in self.models]
        self.config = config or BalancerConfig()
        self.table = table or AllocationTable(self.rail_ids)
        self.excluded: set[int] = set()
        self.flushes = 0
        self._windows: dict[int, dict] = {}
        self._lock = threading.Lock()
        self._threshold: float | None = None
        self._threshold_all: float | None = None

    @classmethod
    def for_ring(cls, profiles: Sequence[RailProfile], world_size: int, config=None, table=None) -> "Balancer":
        return cls([ring_profile(p, world_size) for p in profiles], config, table)

    # -- model queries --

    @property
    def sync_overhead(self) -> float:
        return self.config.sync_overhead or 0.0

    def set_sync_overhead(self, value: float) -> None:
        self.config.sync_overhead = max(0.0, float(value))
        self._threshold = None
        self._threshold_all = None

    def _active(self) -> list[RailProfile]:
        return [m for m in self.models if m.rail_id not in self.excluded]

    @property
    def threshold(self) -> float:
        if self._threshold is None:
            active = self._active()
            if len(active) < 2:
                self._threshold = math.inf
            else:
                self._threshold = find_threshold(active, None, self.sync_overhead, tau=self.config.tau)
        return self._threshold

    def _index(self, rail_id):
        return self.rail_ids.index(rail_id)

    # -- decisions --

    def entry(self, payload: int) -> BucketEntry:
        """Table entry for ``payload``, creating it on first sight."""
        b = size_bucket(payload)
        with self._lock:
            e = self.table.entries.get(b)
            if e is None:
                e = self._decide(b, payload)
            return e

    def _decide(self, bucket: int, payload: int) -> BucketEntry:
        models = self.models
        _, best = cold_latency(models, payload)
        if len(models) < 2 or not gate_open(models, payload, self.config.tau) or payload < self.threshold_all():
            return self.table.set_cold(bucket, best)
        near = self.table.nearest_hot(bucket)
        if near is not None:
            return self.table.set_hot(bucket, near.alpha, iters=1)
        return self.table.set_hot(bucket, [1.0 / len(models)] * len(models), iters=0)

    def threshold_all(self) -> float:
        """Cold/hot boundary over the full rail set, independent of exclusions."""
        if self._threshold_all is None:
            if len(self.models) < 2:
                self._threshold_all = math.inf
            else:
                self._threshold_all = find_threshold(self.models, None, self.sync_overhead, tau=self.config.tau)
        return self._threshold_all

    def effective_alpha(self, payload: int) -> list:
        """Split actually used now: the table's, restricted to healthy rails.

        The throughput gate is re-checked here so a closed gate forces a
        single rail whatever the table says.
        """
        e = self.entry(payload)
        active = self._active()
        if not active:
            raise NoHealthyRail("every rail is excluded")
        if e.state is BucketState.HOT and len(active) > 1 and gate_open(active, payload, self.config.tau):
            alive = np.array([r not in self.excluded for r in self.rail_ids], dtype=float)
            a = np.array(e.alpha) * alive
            if a.sum() > 0:
                return list(a / a.sum())
        if e.state is BucketState.COLD and e.best_rail not in self.excluded:
            return self.table.unit(e.best_rail)
        return self.table.unit(cold_latency(active, payload)[1])

    def allocate(self, payload: int) -> list[tuple[int, Segment]]:
        """Segments for one operation; rails with no bytes are left out."""
        alpha = self.effective_alpha(payload)
        segs = split_by_ratios(payload, alpha)
        return [(r, s) for r, s, a in zip(self.rail_ids, segs, alpha) if a > 0 and s.length > 0]

    def state_of(self, payload: int) -> str:
        alloc = self.allocate(payload)
        return "hot" if len(alloc) > 1 else "cold"

    # -- telemetry --

    def record_latency(self, rail_id: int, bucket: int, duration: float) -> float | None:
        """Append one per-rail sample; returns the window mean on the flush sample."""
        with self._lock:
            w = self._windows.setdefault(bucket, {})
            win = w.get(rail_id)
            if win is None:
                win = w[rail_id] = LatencyWindow(rail_id, bucket, self.config.window)
            return win.add(duration)

    def record_operation(self, payload: int, rail_latency: Mapping[int, float], op_latency: float,
                         apply: bool = True) -> FlushEvent | None:
        """Feed one finished operation. Every ``window`` operations of a bucket
        a :class:`FlushEvent` is produced (and applied unless ``apply`` is False,
        in which case the caller applies it after agreeing on it with its peers)."""
        b = size_bucket(payload)
        means = {}
        for r, d in rail_latency.items():
            m = self.record_latency(r, b, d)
            if m is not None:
                means[r] = m
        op_mean = self.record_latency(-1, b, op_latency)
        if op_mean is None:
            return None
        ev = FlushEvent(b, payload, means, op_mean)
        with self._lock:
            self._windows.pop(b, None)
        if apply:
            self.apply_flush(ev)
        return ev

    def apply_flush(self, ev: FlushEvent) -> BucketEntry:
        with self._lock:
            self.flushes += 1
            e = self.table.entries.get(ev.size_bucket)
            if e is None or e.state is BucketState.COLD or e.converged:
                return e
            if self.excluded or set(ev.rail_means) != {r for r, a in zip(self.rail_ids, e.alpha) if a > 0}:
                # degraded or mismatched window: telemetry not comparable
                return e
            lat = np.array([ev.rail_means.get(r, m.t_setup) for r, m in zip(self.rail_ids, self.models)])
            if e.iters == 0:
                alpha = init_coefficients(lat)
                return self.table.set_hot(ev.size_bucket, alpha, iters=1)
            s = ev.payload
            setups = [m.t_setup for m in self.models]
            slopes = [m.transfer_time(s) for m in self.models]
            alpha, conv = update_coefficients(e.alpha, lat, setups=setups, slopes=slopes,
                                              eta=self.config.eta, eps=self.config.convergence_eps)
            it = e.iters + 1
            return self.table.set_hot(ev.size_bucket, alpha, iters=it,
                                      converged=conv or it >= self.config.max_iters)

    # -- health --

    def exclude(self, rail_id: int) -> None:
        self._index(rail_id)
        with self._lock:
            self.excluded.add(rail_id)
            self._threshold = None
            self._windows.clear()

    def readmit(self, rail_id: int) -> None:
        self._index(rail_id)
        with self._lock:
            self.excluded.discard(rail_id)
            self._threshold = None
            self._windows.clear()

    def converge(self, payload: int, measure: Callable[[Sequence[float]], Mapping[int, float]],
                 max_flushes: int | None = None) -> BucketEntry:
        """Drive one bucket to convergence with a latency oracle (virtual time use)."""
        limit = max_flushes or self.config.max_iters + 1
        for _ in range(limit):
            e = self.entry(payload)
            if e.state is BucketState.COLD or e.converged:
                return e
            alpha = self.effective_alpha(payload)
            lat = measure(alpha)
            ev = FlushEvent(size_bucket(payload), payload,
                            {r: lat[r] for r, a in zip(self.rail_ids, alpha) if a > 0},
                            max(lat.values()))
            self.apply_flush(ev)
        return self.entry(payload)


class NoHealthyRail(RuntimeError):
    pass


# --- compute tokens ------------------------------------------------------------

class Phase(Enum):
    IO = "io"
    COMMUNICATION = "communication"
    COMPUTATION = "computation"


@dataclass
class Grant:
    rail_id: int
    phase: Phase
    tokens: int


class ComputePool:
    """Token semaphore that lets only the computation phase hold many cores.

    io and communication grants are a single token that never waits;
    ``outstanding`` counts computation tokens, bounded by ``total_tokens``.
    """

    def __init__(self, total_tokens: int | None = None, demand: Mapping[int, int] | None = None):
        self.total_tokens = total_tokens or max(2, os.cpu_count() or 2)
        self.demand = dict(demand or {})
        self.outstanding = 0
        self.peak = 0
        self._held: dict[int, Grant] = {}
        self._cond = threading.Condition()

    def tokens_for(self, rail_id: int, phase: Phase) -> int:
        if phase is not Phase.COMPUTATION:
            return 1
        return max(1, min(self.demand.get(rail_id, 1), self.total_tokens))

    def acquire(self, rail_id: int, phase: Phase) -> Grant:
        """Grant tokens for ``phase``; only computation grants can block."""
        n = self.tokens_for(rail_id, phase)
        with self._cond:
            if rail_id in self._held:
                raise RuntimeError(f"rail {rail_id} already holds a grant")
            if phase is Phase.COMPUTATION:
                self._cond.wait_for(lambda: self.outstanding + n <= self.total_tokens)
                self.outstanding += n
                self.peak = max(self.peak, self.outstanding)
            g = Grant(rail_id, phase, n)
            self._held[rail_id] = g
            return g

    def release(self, grant: Grant) -> None:
        with self._cond:
            if self._held.get(grant.rail_id) is not grant:
                raise RuntimeError("grant not held")
            del self._held[grant.rail_id]
            if grant.phase is Phase.COMPUTATION:
                self.outstanding -= grant.tokens
            self._cond.notify_all()

    def phase(self, rail_id: int, phase: Phase):
        pool = self

        class _Ctx:
            def __enter__(self):
                self.g = pool.acquire(rail_id, phase)
                return self.g

            def __exit__(self, *exc):
                pool.release(self.g)
                return False

        return _Ctx()


def acquire_phase_tokens(pool: ComputePool, rail_id: int, phase: Phase) -> Grant:
    return pool.acquire(rail_id, phase)


def release_phase_tokens(pool: ComputePool, grant: Grant) -> None:
    pool.release(grant)
