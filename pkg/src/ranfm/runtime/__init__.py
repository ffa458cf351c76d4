"""Checkpointing, streaming inference, simulation, benchmarking and the CLI."""
from .bench import BenchRow, bench, bench_grid, rows_to_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .simulate import SCENARIOS, ScenarioSpec, simulate_telemetry
from .stream import StreamError, StreamInferencer, StreamState, expected_outputs, stream_infer

__all__ = [
    "BenchRow", "bench", "bench_grid", "rows_to_csv",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "SCENARIOS", "ScenarioSpec", "simulate_telemetry",
    "StreamError", "StreamInferencer", "StreamState", "expected_outputs", "stream_infer",
]
