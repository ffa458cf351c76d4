"""Synthetic RAN telemetry for the four demo scenarios.

Channels are KPI archetypes (RSRP-, SINR-, BLER-, PRB-, CQI-like); they are
stand-ins for a live testbed, not models of any particular deployment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datapile import CuratedDataset

SCENARIOS = ("jamming", "mobility", "embb_load", "cqi_mask")
DEFAULT_PERIOD_MS = 10.0


@dataclass
class ScenarioSpec:
    scenario: str
    duration: int = 4096
    n_channels: int = 4
    period_ms: float = DEFAULT_PERIOD_MS
    seed: int = 0
    events: list | None = None  # [(start, length), ...]; None picks a default schedule
    window: int = 512
    missing_ratio: float = 0.5
    block: int = 8

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.duration < self.window:
            raise ValueError(f"duration {self.duration} is shorter than the window {self.window}")
        if self.n_channels < 1:
            raise ValueError("need at least one channel")
        if self.events is not None:
            self.events = [tuple(int(v) for v in e) for e in self.events]
            for start, length in self.events:
                if start < 0 or length < 1 or start + length > self.duration:
                    raise ValueError(f"event ({start}, {length}) outside a trace of {self.duration}")


def _ar1(rng, n, phi=0.95, sigma=1.0):
    noise = rng.standard_normal(n) * sigma
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + noise[i]
        out[i] = acc
    return out * np.sqrt(1 - phi * phi)


def _kpi_background(rng, n, n_channels, cycle):
    """Shared slow cycle plus per-channel AR(1) noise, so channels are correlated."""
    t = np.arange(n)
    shared = np.sin(2 * np.pi * t / cycle + rng.uniform(0, 2 * np.pi))
    rows = []
    for _ in range(n_channels):
        rows.append(rng.uniform(0.6, 1.4) * shared + 0.3 * _ar1(rng, n))
    return np.array(rows)


def _default_events(n, rng, count, lo, hi):
    events = []
    step = n // count
    for k in range(count):
        length = int(rng.integers(lo, hi + 1))
        start = k * step + int(rng.integers(step // 4, max(step // 4 + 1, step - length)))
        events.append((start, min(length, n - start)))
    return events


def _jamming(spec, rng):
    n, C = spec.duration, spec.n_channels
    base = _kpi_background(rng, n, C, cycle=max(spec.window // 2, 64))
    names = ["rsrp", "sinr", "bler", "throughput"] + [f"kpi{i}" for i in range(4, C)]
    names = names[:C]
    offsets = {"rsrp": -85.0, "sinr": 18.0, "bler": 5.0, "throughput": 40.0}
    scales = {"rsrp": 2.0, "sinr": 1.5, "bler": 1.0, "throughput": 4.0}
    values = np.array([offsets.get(k, 0.0) + scales.get(k, 1.0) * base[i] for i, k in enumerate(names)])
    labels = np.zeros(n, dtype=np.int64)
    events = _default_events(n, rng, max(1, n // 2048), 48, 96) if spec.events is None else spec.events
    hit = [i for i, k in enumerate(names) if k in ("sinr", "bler")] or [0]
    for start, length in events:
        seg = slice(start, start + length)
        for i in hit:
            sign = -1.0 if names[i] == "sinr" else 1.0
            s = scales.get(names[i], 1.0)
            x = values[i, seg]
            mu = x.mean()
            values[i, seg] = mu + 4.0 * (x - mu) + sign * 8.0 * s + 2.0 * s * rng.standard_normal(length)
        labels[seg] = 1
    return values, names, labels, None


def _mobility(spec, rng):
    n, C = spec.duration, spec.n_channels
    if spec.events is None:
        events = [(s, min(spec.window * 2, n - s)) for s in range(spec.window * 2, n, spec.window * 4)]
    else:
        events = spec.events
    labels = np.zeros(n, dtype=np.int64)
    for start, length in events:
        labels[start:start + length] = 1
    t = np.arange(n)
    names = ["rsrp", "sinr", "cqi_mean"] + [f"phy{i}" for i in range(3, C)]
    names = names[:C]
    rows = []
    for i in range(C):
        still = 0.2 * _ar1(rng, n, 0.9)
        drift = np.cumsum(rng.standard_normal(n)) * 0.05
        moving = 2.5 * np.sin(2 * np.pi * t / rng.uniform(40, 80)) + 1.5 * _ar1(rng, n, 0.7) + drift
        rows.append(np.where(labels == 1, moving, still) + (-90.0 if i == 0 else 10.0))
    return np.array(rows), names, labels, None


def _embb(spec, rng):
    n, C = spec.duration, spec.n_channels
    walk = np.cumsum(rng.standard_normal(n)) * 0.8
    kernel = np.ones(25) / 25
    smooth = np.convolve(walk, kernel, mode="same")
    t = np.arange(n)
    bursts = 25.0 * (np.sin(2 * np.pi * t / 300.0) > 0.8)
    prb = np.clip(45.0 + smooth - smooth.mean() + bursts + 10 * np.sin(2 * np.pi * t / 150.0), 0.0, 100.0)
    names = ["prb_util", "dl_throughput", "active_ues"] + [f"kpi{i}" for i in range(3, C)]
    names = names[:C]
    rows = [prb]
    for i in range(1, C):
        rows.append(prb * rng.uniform(0.5, 2.0) + 3.0 * _ar1(rng, n, 0.8))
    return np.array(rows), names, None, None


def _cqi(spec, rng):
    n, C = spec.duration, spec.n_channels
    t = np.arange(n)
    sinr = 12.0 + 6.0 * np.sin(2 * np.pi * t / 200.0 + rng.uniform(0, 6.28)) + 1.5 * _ar1(rng, n, 0.9)
    cqi = np.clip(np.round(sinr * 15.0 / 25.0 + 1.0), 0, 15)
    names = ["cqi", "sinr", "rsrp"] + [f"kpi{i}" for i in range(3, C)]
    names = names[:C]
    rows = [cqi]
    for i in range(1, C):
        rows.append(sinr * rng.uniform(0.8, 1.2) + rng.uniform(-100, 0) * (i == 2) + 0.5 * _ar1(rng, n))
    missing = np.zeros((C, n), dtype=bool)
    blocks = n // spec.block
    hide = rng.choice(blocks, size=int(round(spec.missing_ratio * blocks)), replace=False)
    for b in hide:
        missing[0, b * spec.block:(b + 1) * spec.block] = True
    return np.array(rows), names, None, missing


_BUILDERS = {"jamming": _jamming, "mobility": _mobility, "embb_load": _embb, "cqi_mask": _cqi}
_TASKS = {"jamming": "anomaly", "mobility": "classify", "embb_load": "forecast", "cqi_mask": "impute"}


def simulate_telemetry(spec: ScenarioSpec) -> CuratedDataset:
    """Deterministic scenario trace. ``cqi_mask`` keeps true values and flags hidden ones in ``missing``."""
    rng = np.random.default_rng(spec.seed)
    values, names, labels, missing = _BUILDERS[spec.scenario](spec, rng)
    return CuratedDataset(
        name=f"{spec.scenario}_s{spec.seed}",
        values=values,
        channel_names=list(names),
        sampling_period_ms=spec.period_ms,
        labels=labels,
        label_kind="per_timestep" if labels is not None else None,
        split="test",
        task=_TASKS[spec.scenario],
        missing=missing,
        seed=spec.seed,
    )
