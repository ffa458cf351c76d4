"""Per-window inference latency and memory."""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..model import Model, revin_normalize
from ..numerics import no_grad

CSV_HEADER = "T,C,median_ms,p95_ms,peak_mb"


@dataclass
class BenchRow:
    T: int
    C: int
    median_ms: float
    p95_ms: float
    peak_mb: float

    def csv(self) -> str:
        return f"{self.T},{self.C},{self.median_ms:.4f},{self.p95_ms:.4f},{self.peak_mb:.4f}"


def _run_once(model: Model, x: np.ndarray) -> None:
    x_norm, _ = revin_normalize(x, model.cfg.revin_eps)
    with no_grad():
        model.reconstruct(x_norm)


def bench(model: Model, T: int, C: int, repeat: int = 10, seed: int = 0) -> BenchRow:
    """Time the unmasked reconstruction path on one random ``(C, T)`` window.

    The backbone is window-agnostic, so the model is re-windowed to ``T``
    (``T`` must be a multiple of the patch length). Memory is measured in a
    separate traced pass so tracing does not inflate the latency figures.
    """
    if repeat < 3:
        raise ValueError("repeat must be >= 3")
    cfg = model.cfg
    if T % cfg.patch_len:
        raise ValueError(f"window {T} is not a multiple of patch length {cfg.patch_len}")
    m = Model(cfg.replace(window=T, horizon=None, n_classes=None), model.params)
    x = np.random.default_rng(seed).standard_normal((C, T))
    _run_once(m, x)  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        _run_once(m, x)
        times.append((time.perf_counter() - t0) * 1e3)
    tracemalloc.start()
    try:
        _run_once(m, x)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return BenchRow(T, C, float(np.median(times)), float(np.percentile(times, 95)), peak / 2 ** 20)


def bench_grid(model: Model, windows: Iterable[int], channels: Iterable[int], repeat: int = 10,
               seed: int = 0) -> list[BenchRow]:
    """One row per (T, C) combination, T-major."""
    return [bench(model, T, C, repeat, seed) for T in windows for C in channels]


def rows_to_csv(rows: list[BenchRow]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv() for r in rows]) + "\n"
