"""Fit rail latency models to measured single-rail allreduce samples."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import InvalidArgument, ProtocolKind, RailProfile, interpolate_latency

@dataclass(frozen=True)
class CalibratedProfile:
    """A rail whose whole-operation latency was measured at ``n_nodes`` nodes.

    With two samples the model is the line latency = t_setup + S * slope;
    with more it interpolates the samples exactly and keeps the
    least-squares line as summary. ``slope`` is in µs per byte.
    """

    profile: RailProfile
    samples: tuple[tuple[int, float], ...]
    t_setup: float
    slope: float
    mode: str
    n_nodes: int = 4

    @property
    def rail_id(self) -> int:
        return self.profile.rail_id

    def latency(self, size: float) -> float:
        """Single-rail allreduce latency (µs) at the calibration node count."""
        if self.mode == "linear":
            return self.t_setup + self.slope * size
        return interpolate_latency(self.samples, size)

    def residuals(self) -> np.ndarray:
        return np.array([abs(self.latency(s) - l) / l for s, l in self.samples])

    def with_id(self, rail_id: int) -> "CalibratedProfile":
        return CalibratedProfile(self.profile.with_id(rail_id), self.samples, self.t_setup,
                                 self.slope, self.mode, self.n_nodes)


def _fit(s: np.ndarray, l: np.ndarray) -> tuple[float, float]:
    # relative least squares so 1 KB and 64 MB samples weigh alike
    w = 1.0 / l
    A = np.stack([np.ones_like(s), s], axis=1) * w[:, None]
    (t, c), *_ = np.linalg.lstsq(A, l * w, rcond=None)
    return float(t), float(c)


def calibrate(samples: Sequence[tuple[float, float]], rail_id: int = 0,
              protocol: ProtocolKind | str = ProtocolKind.TCP, n_nodes: int = 4,
              cpu_sensitivity: float | None = None) -> CalibratedProfile:
    """Model for one rail from (size bytes, latency µs) samples."""
    if len(samples) < 2:
        raise InvalidArgument("calibration needs at least 2 samples")
    pts = sorted((int(s), float(l)) for s, l in samples)
    if any(s <= 0 or l <= 0 for s, l in pts):
        raise InvalidArgument("samples must have positive size and latency")
    if len({s for s, _ in pts}) != len(pts):
        raise InvalidArgument("duplicate sample sizes")
    if any(b[1] <= a[1] for a, b in zip(pts, pts[1:])):
        raise InvalidArgument("latency must grow with size")
    s = np.array([p[0] for p in pts], dtype=float)
    l = np.array([p[1] for p in pts], dtype=float)
    t, c = _fit(s, l)
    consistent = t >= 0 and c > 0
    if len(pts) == 2 and consistent:
        prof = RailProfile(rail_id, protocol, t, 1e6 / c, None, cpu_sensitivity=cpu_sensitivity)
        return CalibratedProfile(prof, tuple(pts), t, c, "linear", n_nodes)
    # three or more samples (or an inconsistent pair): interpolate exactly,
    # keeping the least-squares line as the summary (t_setup, slope)
    if not consistent:
        t = float(l[0])
        c = max(float((l[-1] - l[-2]) / (s[-1] - s[-2])), 1e-12)
    prof = RailProfile(rail_id, protocol, t, 1e6 / c, tuple(pts), cpu_sensitivity=cpu_sensitivity)
    return CalibratedProfile(prof, tuple(pts), t, c, "interpolated", n_nodes)

KB = 1024
MB = 1024 * 1024

# Single-rail 4-node averages used as the reference calibration.
SHARP_SAMPLES = ((1 * KB, 9.0), (8 * MB, 22140.0), (64 * MB, 181484.0))
TCP_SAMPLES = ((1 * KB, 982.0), (8 * MB, 37137.0), (64 * MB, 316323.0))
# illustrative custom-RDMA curve: slower than SHARP for tiny messages,
# faster for bulk transfers
GLEX_SAMPLES = ((1 * KB, 25.0), (8 * MB, 16500.0), (64 * MB, 131000.0))


def reference_rails() -> tuple[CalibratedProfile, CalibratedProfile]:
    """(TCP as rail 0, SHARP as rail 1) calibrated from the reference samples."""
    return (calibrate(TCP_SAMPLES, 0, ProtocolKind.TCP),
            calibrate(SHARP_SAMPLES, 1, ProtocolKind.SHARP))


def glex_rail(rail_id: int = 1) -> CalibratedProfile:
    return calibrate(GLEX_SAMPLES, rail_id, ProtocolKind.GLEX)
