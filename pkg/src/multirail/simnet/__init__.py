"""Virtual-time simulator running the live balancer over modelled rails."""
from .calibration import (CalibratedProfile, GLEX_SAMPLES, SHARP_SAMPLES, TCP_SAMPLES, calibrate, glex_rail,
                          reference_rails)
from .events import EventKind, EventLoop, SimEvent
from .model import RailModel, SimConfig, models_for
from .run import (FailureTrace, OpOutcome, Scheduler, SimResult, Simulation, simulate_allreduce,
                  simulate_failure_trace, single_rail_latency)

__all__ = [
    "CalibratedProfile", "GLEX_SAMPLES", "EventKind", "EventLoop", "FailureTrace", "OpOutcome", "RailModel",
    "SHARP_SAMPLES", "Scheduler", "SimConfig", "SimEvent", "SimResult", "Simulation", "TCP_SAMPLES",
    "calibrate", "glex_rail", "models_for", "reference_rails", "simulate_allreduce", "simulate_failure_trace",
    "single_rail_latency",
]
