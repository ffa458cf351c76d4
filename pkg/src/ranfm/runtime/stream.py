"""Sliding-window inference over a sample stream."""
from __future__ import annotations

import csv
import math
from collections import deque
from typing import Iterable, Iterator, TextIO

import numpy as np

from ..datapile import LABEL_COLUMN, CurationError
from ..model import Model, revin_denormalize, revin_normalize
from ..numerics import no_grad
from ..tasks import anomaly_score, impute

DEFAULT_HOP = 64


class StreamError(ValueError):
    pass


class StreamState:
    """Ring buffers of the last ``window`` samples per channel."""

    def __init__(self, n_channels: int, window: int, hop: int):
        if hop < 1:
            raise ValueError("hop must be >= 1")
        self.n_channels, self.window, self.hop = n_channels, window, hop
        self.values = deque(maxlen=window)
        self.missing = deque(maxlen=window)
        self.timestamps = deque(maxlen=window)
        self.seen = 0

    def push(self, timestamp: float, sample, missing=None) -> bool:
        """Append one sample; True when an inference is due."""
        sample = np.asarray(sample, dtype=np.float64)
        if sample.shape != (self.n_channels,):
            raise StreamError(f"expected {self.n_channels} channels, got {sample.shape[0] if sample.ndim else 1}")
        self.values.append(sample)
        self.missing.append(np.zeros(self.n_channels, bool) if missing is None else np.asarray(missing, bool))
        self.timestamps.append(timestamp)
        self.seen += 1
        return self.seen >= self.window and (self.seen - self.window) % self.hop == 0

    def window_array(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.values).T, np.array(self.missing).T


class StreamInferencer:
    def __init__(self, model: Model, task: str, n_channels: int, hop: int = DEFAULT_HOP):
        if task not in ("anomaly", "classify", "forecast", "impute"):
            raise ValueError(f"unknown task {task!r}")
        if task == "classify" and not model.cfg.n_classes:
            raise ValueError("model has no classification head")
        if task == "forecast" and not model.cfg.horizon:
            raise ValueError("model has no forecast head")
        self.model, self.task = model, task
        self.state = StreamState(n_channels, model.cfg.window, hop)

    def push(self, timestamp: float, sample) -> dict | None:
        sample = np.asarray(sample, dtype=np.float64)
        nan = np.isnan(sample)
        if nan.any() and self.task != "impute":
            raise StreamError(f"NaN sample at t={timestamp} outside an imputation stream")
        if not self.state.push(timestamp, sample, nan):
            return None
        return self._infer()

    def _infer(self) -> dict:
        x, miss = self.state.window_array()
        cfg = self.model.cfg
        record = {"index": self.state.seen - 1, "start": self.state.seen - cfg.window,
                  "timestamp": self.state.timestamps[-1], "task": self.task}
        if self.task == "impute":
            filled = impute(np.where(miss, np.nan, x), miss, self.model)
            record["filled"] = filled.tolist()
            record["n_imputed"] = int(miss.sum())
            return record
        x_norm, stats = revin_normalize(x, cfg.revin_eps)
        with no_grad():
            if self.task == "anomaly":
                rec = self.model.reconstruct(x_norm).data
                NP = rec.shape[-1]
                scores = anomaly_score(x_norm[..., :NP], rec)
                record["scores"] = scores.tolist()
                record["score"] = float(scores.max())
            elif self.task == "classify":
                logits = self.model.classify(x_norm).data
                record["logits"] = logits.tolist()
                record["label"] = int(np.argmax(logits))
            else:
                pred = revin_denormalize(self.model.forecast(x_norm).data, stats)
                record["forecast"] = pred.tolist()
        return record


def stream_infer(rows: Iterable[tuple[float, np.ndarray]], model: Model, task: str,
                 hop: int = DEFAULT_HOP, n_channels: int | None = None) -> Iterator[dict]:
    """Run inference every ``hop`` samples once ``window`` samples have arrived."""
    runner = None
    for ts, sample in rows:
        sample = np.asarray(sample, dtype=np.float64)
        if runner is None:
            runner = StreamInferencer(model, task, n_channels or sample.shape[0], hop)
        out = runner.push(ts, sample)
        if out is not None:
            yield out


def expected_outputs(length: int, window: int, hop: int) -> int:
    return 0 if length < window else (length - window) // hop + 1


def read_csv_stream(fh: TextIO) -> Iterator[tuple[float, np.ndarray]]:
    """Parse the curation CSV contract lazily; the label column is ignored."""
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        return
    if not header or header[0].lower() != "timestamp":
        raise CurationError("stream must start with a header whose first column is 'timestamp'")
    keep = [j for j, h in enumerate(header) if j > 0 and h != LABEL_COLUMN]
    for row in reader:
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise StreamError(f"row has {len(row)} fields, header has {len(header)}")
        ts_cell = row[0].strip()
        ts = float(ts_cell) * (1000.0 if ("." in ts_cell or "e" in ts_cell.lower()) else 1.0)
        vals = np.array([_cell(row[j]) for j in keep])
        yield ts, vals


def _cell(text: str) -> float:
    text = text.strip()
    if not text:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise StreamError(f"non-numeric stream cell {text!r}") from None
