"""Benchmark harness: live sweeps, presets and the nezha-bench command."""
from .presets import PRESETS, UnknownPreset, run_preset
from .records import BenchConfig, BenchRecord, FailureInjection, HEADER
from .runner import BenchError, ModelClock, bench_rank, run_benchmark, spawn_ranks, write_records

__all__ = ["BenchConfig", "BenchError", "BenchRecord", "FailureInjection", "HEADER", "ModelClock", "PRESETS",
           "UnknownPreset", "bench_rank", "run_benchmark", "run_preset", "spawn_ranks", "write_records"]
