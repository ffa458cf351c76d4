"""Curation of raw telemetry CSVs into training/evaluation datasets.

Stages: ingest -> filter_channels -> align_temporal -> prune_channels
-> interpolate_sparse -> [inject_anomalies] -> make_split -> write.
Every stage returns a new table and appends what it removed to the
table's report.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

LABEL_COLUMN = "label"
ANOMALY_KINDS = ("spike", "drop", "level_shift", "variance_change", "saturation")
CATEGORICAL_MAX_DISTINCT = 10
CATEGORICAL_MAX_FRACTION = 0.01


class CurationError(ValueError):
    """Input cannot be turned into a usable dataset."""


@dataclass
class RawTable:
    timestamps: np.ndarray  # ms, NaN when unparseable
    columns: dict  # name -> float array, NaN = missing
    source: str = ""
    text_cells: dict = field(default_factory=dict)  # name -> count of non-numeric cells
    labels: np.ndarray | None = None
    report: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.timestamps)

    def replace(self, **changes) -> "RawTable":
        return dataclasses.replace(self, **changes)

    def drop(self, name: str, stage: str, reason: str) -> None:
        self.columns.pop(name)
        self.report.append({"stage": stage, "kind": "channel", "item": name, "reason": reason})


@dataclass
class CuratedDataset:
    name: str
    values: np.ndarray  # (C, T), NaN only where ``missing`` is set
    channel_names: list
    sampling_period_ms: float
    start_ms: float = 0.0
    labels: np.ndarray | int | None = None
    label_kind: str | None = None
    split: str = "train"
    task: str = "pretrain"
    missing: np.ndarray | None = None
    report: list = field(default_factory=list)
    seed: int = 0
    files: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise CurationError(f"dataset {self.name!r} needs a non-empty (C, T) matrix")
        if self.missing is not None:
            self.missing = np.asarray(self.missing, dtype=bool)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_ms + self.sampling_period_ms * np.arange(self.length)

    def missing_mask(self) -> np.ndarray:
        m = np.isnan(self.values)
        if self.missing is not None:
            m |= self.missing
        return m

    def observed_values(self) -> np.ndarray:
        """Values with hidden samples set to NaN."""
        return np.where(self.missing_mask(), np.nan, self.values)

    def filled_values(self) -> np.ndarray:
        """Values with missing samples linearly interpolated (for statistics and training)."""
        miss = self.missing_mask()
        if not miss.any():
            return self.values
        from .tasks import baseline_impute
        return baseline_impute(np.where(miss, 0.0, self.values), miss, "linear")

    def slice(self, start: int, stop: int, split: str, name: str | None = None) -> "CuratedDataset":
        labels = self.labels
        if isinstance(labels, np.ndarray) and labels.ndim == 1:
            labels = labels[start:stop]
        return dataclasses.replace(
            self, name=name or self.name, values=self.values[:, start:stop].copy(),
            start_ms=self.start_ms + start * self.sampling_period_ms, labels=labels, split=split,
            missing=None if self.missing is None else self.missing[:, start:stop].copy(),
            report=list(self.report), files=[])

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "channels": list(self.channel_names),
            "length": self.length,
            "sampling_period_ms": self.sampling_period_ms,
            "split": self.split,
            "label_kind": self.label_kind,
            "files": list(self.files),
            "curation_report": list(self.report),
            "seed": self.seed,
        }


@dataclass
class AnomalySpec:
    kind: str
    length: int
    magnitude: float
    channels: Sequence[int] = (0,)
    seed: int = 0
    start: int | None = None

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}")
        if self.length < 1:
            raise ValueError("segment length must be >= 1")
        if self.magnitude <= 0:
            raise ValueError("magnitude must be positive")
        self.channels = tuple(int(c) for c in self.channels)

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalySpec":
        return cls(**d)


@dataclass
class SplitSpec:
    strategy: str = "temporal"
    train_fraction: float = 0.70

    def __post_init__(self):
        if self.strategy not in ("temporal", "per_series", "provided"):
            raise ValueError(f"unknown split strategy {self.strategy!r}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train fraction must lie in (0, 1)")


# -- ingestion ----------------------------------------------------------------

def _parse_float(cell: str) -> float | None:
    cell = cell.strip()
    if not cell:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        return None


def _looks_numeric(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def parse_csv(text: str | io.TextIOBase, source: str = "<stream>") -> RawTable:
    reader = csv.reader(io.StringIO(text) if isinstance(text, str) else text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CurationError(f"{source}: empty file") from None
    if not header or all(_looks_numeric(h) for h in header if h.strip()):
        raise CurationError(f"{source}: missing header row")
    if header[0].lower() != "timestamp":
        raise CurationError(f"{source}: first column must be 'timestamp', got {header[0]!r}")
    rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise CurationError(f"{source}: no data rows")

    width = len(header)
    ts_cells = [r[0].strip() if r else "" for r in rows]
    seconds = any(("." in c or "e" in c.lower()) for c in ts_cells if c and _looks_numeric(c))
    ts = np.array([(_parse_float(c) if _parse_float(c) is not None else math.nan) for c in ts_cells])
    if seconds:
        ts = ts * 1000.0

    columns, text_cells, labels = {}, {}, None
    for j, name in enumerate(header[1:], start=1):
        vals = np.empty(len(rows))
        texts = 0
        for i, r in enumerate(rows):
            v = _parse_float(r[j]) if j < len(r) else math.nan
            if v is None:
                texts += 1
                v = math.nan
            vals[i] = v
        if name == LABEL_COLUMN:
            labels = vals
            continue
        if name in columns:
            raise CurationError(f"{source}: duplicate column name {name!r}")
        columns[name] = vals
        text_cells[name] = texts
    if width < 2 and labels is None:
        raise CurationError(f"{source}: no data columns")
    return RawTable(ts, columns, source, text_cells, labels)


def ingest_csv(path) -> RawTable:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_csv(fh, source=path.name)


# -- stages -------------------------------------------------------------------

def filter_channels(t: RawTable) -> RawTable:
    """Drop non-numeric, identifier-like and categorical columns."""
    out = t.replace(columns=dict(t.columns), report=list(t.report))
    for name, vals in t.columns.items():
        obs = vals[~np.isnan(vals)]
        if obs.size == 0:
            out.drop(name, "filter_channels", "non_numeric")
            continue
        integral = np.all(obs == np.round(obs))
        distinct = np.unique(obs).size
        if integral and obs.size >= 3 and distinct == obs.size:
            out.drop(name, "filter_channels", "identifier")
        elif 2 <= distinct <= CATEGORICAL_MAX_DISTINCT and distinct < CATEGORICAL_MAX_FRACTION * obs.size:
            out.drop(name, "filter_channels", "categorical")
    if not out.columns:
        raise CurationError(f"{t.source}: every channel was filtered out")
    return out


def _mode(values: np.ndarray) -> float:
    vals, counts = np.unique(np.round(values, 6), return_counts=True)
    return float(vals[np.argmax(counts)])


def align_temporal(t: RawTable) -> RawTable:
    """Keep the longest uniformly sampled segment and regularize its timestamps."""
    report = list(t.report)
    ts = t.timestamps
    valid = ~np.isnan(ts)
    if not valid.all():
        report.append({"stage": "align_temporal", "kind": "rows", "item": int((~valid).sum()),
                       "reason": "missing_timestamp"})
    idx = np.flatnonzero(valid)
    if idx.size < 2:
        raise CurationError(f"{t.source}: fewer than two timestamped rows")
    diffs = np.diff(ts[idx])
    if np.any(diffs < 0):
        raise CurationError(f"{t.source}: timestamps are not monotone")
    positive = diffs[diffs > 0]
    if positive.size == 0:
        raise CurationError(f"{t.source}: timestamps never advance")
    delta = _mode(positive)

    kept = [idx[0]]
    segments = [[idx[0]]]
    dups = 0
    for i in idx[1:]:
        gap = ts[i] - ts[kept[-1]]
        if gap < 0.5 * delta:
            dups += 1
            continue
        kept.append(i)
        if gap > 1.5 * delta:
            segments.append([i])
        else:
            segments[-1].append(i)
    if dups:
        report.append({"stage": "align_temporal", "kind": "rows", "item": dups, "reason": "duplicate_timestamp"})
    best = max(range(len(segments)), key=lambda k: (len(segments[k]), -k))
    if len(segments[best]) < 2:
        raise CurationError(f"{t.source}: no uniformly sampled segment of length >= 2")
    for k, seg in enumerate(segments):
        if k != best:
            report.append({"stage": "align_temporal", "kind": "segment",
                           "item": [int(seg[0]), int(seg[-1]) + 1], "reason": "inconsistent_sampling"})
    rows = np.array(segments[best])
    start = ts[rows[0]]
    new_ts = start + delta * np.arange(rows.size)
    return t.replace(
        timestamps=new_ts,
        columns={k: v[rows] for k, v in t.columns.items()},
        labels=None if t.labels is None else t.labels[rows],
        report=report,
    )


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    both = ~(np.isnan(a) | np.isnan(b))
    if both.sum() < 2:
        return 0.0
    x, y = a[both] - a[both].mean(), b[both] - b[both].mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    return float(x @ y) / den if den > 0 else 0.0


def prune_channels(t: RawTable, sigma_rel_min: float = 1e-6, corr_max: float = 0.99) -> RawTable:
    """Drop (near-)constant channels, then later members of highly correlated pairs."""
    out = t.replace(columns=dict(t.columns), report=list(t.report))
    for name, vals in t.columns.items():
        obs = vals[~np.isnan(vals)]
        if obs.size == 0 or obs.std() / (abs(obs.mean()) + 1.0) < sigma_rel_min:
            out.drop(name, "prune_channels", "constant")
    kept: list[str] = []
    for name in list(out.columns):
        partner = next((k for k in kept if abs(pearson(out.columns[k], out.columns[name])) > corr_max), None)
        if partner is None:
            kept.append(name)
        else:
            out.drop(name, "prune_channels", f"correlated_with:{partner}")
    if not out.columns:
        raise CurationError(f"{t.source}: every channel was pruned")
    return out


def interpolate_sparse(series: np.ndarray, target_min: int = 1000) -> np.ndarray:
    """Upsample short ``(C, n)`` series by ``k = ceil(target_min / n)``, keeping endpoints."""
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[-1]
    if n < 2:
        raise CurationError("need at least two samples to interpolate")
    if n >= target_min:
        return series
    k = math.ceil(target_min / n)
    grid = np.linspace(0, n - 1, k * n)
    out = np.empty(series.shape[:-1] + (k * n,))
    for c in np.ndindex(series.shape[:-1]):
        row = series[c]
        ok = ~np.isnan(row)
        out[c] = np.interp(grid, np.flatnonzero(ok), row[ok]) if ok.any() else np.nan
    return out


def inject_anomalies(d: CuratedDataset, specs: Sequence[AnomalySpec]) -> CuratedDataset:
    """Insert labeled synthetic anomaly segments; everything else is left bit-identical."""
    values = d.values.copy()
    labels = np.zeros(d.length, dtype=np.int64)
    T = d.length
    std = np.nanstd(d.values, axis=1)
    taken = [np.zeros(T, dtype=bool) for _ in range(d.n_channels)]
    placed = []
    for spec in specs:
        if spec.length >= T:
            raise CurationError(f"anomaly segment of {spec.length} does not fit a series of {T}")
        if any(c < 0 or c >= d.n_channels for c in spec.channels):
            raise CurationError(f"anomaly channels {spec.channels} out of range")
        rng = np.random.default_rng(spec.seed)
        start = spec.start if spec.start is not None else int(rng.integers(0, T - spec.length + 1))
        if start < 0 or start + spec.length > T:
            raise CurationError("anomaly segment outside the series")
        seg = slice(start, start + spec.length)
        for c in spec.channels:
            if taken[c][seg].any():
                raise CurationError(f"overlapping anomaly segments on channel {c}")
            taken[c][seg] = True
            x = values[c, seg]
            k, s = spec.magnitude, std[c]
            if spec.kind == "spike":
                values[c, seg] = x + k * s
            elif spec.kind == "drop":
                values[c, seg] = x - k * s
            elif spec.kind == "level_shift":
                values[c, seg] = x + k * s
            elif spec.kind == "variance_change":
                mu = x.mean()
                values[c, seg] = mu + (x - mu) * (1.0 + k)
            else:
                values[c, seg] = np.nanpercentile(d.values[c], 99)
        labels[seg] = 1
        placed.append({"kind": spec.kind, "start": start, "length": spec.length,
                       "channels": list(spec.channels), "magnitude": spec.magnitude})
    report = list(d.report) + [{"stage": "inject_anomalies", "kind": "segment", "item": p,
                                "reason": "synthetic_anomaly"} for p in placed]
    return dataclasses.replace(d, values=values, labels=labels, label_kind="per_timestep",
                               task="anomaly", report=report)


def make_split(data, spec: SplitSpec = SplitSpec(), seed: int = 0):
    """Return ``(train, test)``.

    ``temporal``: one dataset cut at floor(f*T). ``per_series``: a list of
    datasets shuffled by ``seed``, the first ceil(f*count) go to train.
    ``provided``: datasets already carry their split tag.
    """
    if spec.strategy == "temporal":
        if isinstance(data, (list, tuple)):
            pairs = [make_split(d, spec, seed) for d in data]
            return [p[0] for p in pairs], [p[1] for p in pairs]
        T = data.length
        if T < 2:
            raise CurationError("temporal split needs at least two samples")
        cut = min(max(int(math.floor(spec.train_fraction * T)), 1), T - 1)
        return data.slice(0, cut, "train"), data.slice(cut, T, "test")
    items = list(data) if isinstance(data, (list, tuple)) else [data]
    if spec.strategy == "provided":
        return [d for d in items if d.split == "train"], [d for d in items if d.split == "test"]
    if len(items) < 2:
        raise CurationError("per-series split needs at least two series")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = min(math.ceil(spec.train_fraction * len(items)), len(items) - 1)
    train = [dataclasses.replace(items[i], split="train") for i in order[:n_train]]
    test = [dataclasses.replace(items[i], split="test") for i in order[n_train:]]
    return sorted(train, key=lambda d: d.name), sorted(test, key=lambda d: d.name)


# -- orchestration ------------------------------------------------------------

@dataclass
class CurateOptions:
    task: str = "pretrain"
    sigma_rel_min: float = 1e-6
    corr_max: float = 0.99
    target_min: int = 1000
    anomalies: list | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    seed: int = 0


def _split_from_name(stem: str) -> tuple[str, str | None]:
    for tag in ("train", "test"):
        if stem.endswith("." + tag):
            return stem[: -len(tag) - 1], tag
    return stem, None


def curate_table(t: RawTable, name: str, opts: CurateOptions) -> CuratedDataset:
    """All per-file stages up to (not including) the split."""
    t = filter_channels(t)
    t = align_temporal(t)
    t = prune_channels(t, opts.sigma_rel_min, opts.corr_max)
    names = list(t.columns)
    values = np.stack([t.columns[k] for k in names])
    period = float(np.round(t.timestamps[1] - t.timestamps[0], 6))
    report = list(t.report)
    labels = t.labels
    n = values.shape[1]
    if n < opts.target_min:
        values = interpolate_sparse(values, opts.target_min)
        k = values.shape[1] // n
        period = float(np.round(period * (n - 1) / (k * n - 1), 6))
        report.append({"stage": "interpolate_sparse", "kind": "series", "item": [n, values.shape[1]],
                       "reason": "sparse_trace"})
        if labels is not None:
            labels = labels[np.round(np.linspace(0, n - 1, k * n)).astype(int)]
    missing = np.isnan(values)
    if missing.any() and opts.task != "impute":
        from .tasks import baseline_impute
        if missing.all(axis=1).any():
            raise CurationError(f"{t.source}: a channel has no observed values")
        values = baseline_impute(np.where(missing, 0.0, values), missing, "linear")
        report.append({"stage": "fill_missing", "kind": "cells", "item": int(missing.sum()),
                       "reason": "linear_interpolation"})
        missing = None
    elif not missing.any():
        missing = None
    label_kind = None
    if labels is not None:
        if np.isnan(labels).any():
            raise CurationError(f"{t.source}: label column has missing cells")
        labels = labels.astype(np.int64)
        label_kind = "per_timestep"
    ds = CuratedDataset(name, values, names, period, float(t.timestamps[0]), labels, label_kind,
                        task=opts.task, missing=missing, report=report, seed=opts.seed)
    if opts.anomalies:
        ds = inject_anomalies(ds, opts.anomalies)
    return ds


@dataclass
class CurationResult:
    datasets: list
    failures: list

    def manifest(self) -> dict:
        return {"datasets": [d.manifest() for d in self.datasets], "failures": self.failures}


def curate(source, options: CurateOptions | None = None) -> CurationResult:
    """Run the pipeline over one CSV or every ``*.csv`` in a directory (lexicographic order)."""
    opts = options or CurateOptions()
    source = Path(source)
    files = sorted(source.glob("*.csv")) if source.is_dir() else [source]
    if not files:
        raise CurationError(f"no CSV files under {source}")
    whole, failures = [], []
    for f in files:
        stem, provided = _split_from_name(f.stem)
        try:
            ds = curate_table(ingest_csv(f), stem, opts)
        except (CurationError, ValueError) as exc:
            log.warning("skipping %s: %s", f.name, exc)
            failures.append({"file": f.name, "error": str(exc)})
            continue
        if opts.split.strategy == "provided":
            if provided is None:
                failures.append({"file": f.name, "error": "no provided split tag in file name"})
                continue
            ds.split = provided
        whole.append(ds)

    out: list[CuratedDataset] = []
    if opts.split.strategy == "temporal":
        for d in whole:
            try:
                tr, te = make_split(d, opts.split, opts.seed)
            except CurationError as exc:
                failures.append({"file": d.name, "error": str(exc)})
                continue
            out += [tr, te]
    elif opts.split.strategy == "per_series":
        if whole:
            tr, te = make_split(whole, opts.split, opts.seed)
            out += tr + te
    else:
        out = whole
    out.sort(key=lambda d: (d.name, d.split))
    return CurationResult(out, failures)


# -- storage ----------------------------------------------------------------

def _fmt_ts(ts: np.ndarray) -> list[str]:
    if np.all(ts == np.round(ts)):
        return [str(int(v)) for v in ts]
    return [repr(float(v) / 1000.0) for v in ts]


def dataset_to_csv(d: CuratedDataset, include_missing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    labels = d.labels if isinstance(d.labels, np.ndarray) and d.labels.ndim == 1 else None
    header = ["timestamp"] + list(d.channel_names) + ([LABEL_COLUMN] if labels is not None else [])
    w.writerow(header)
    miss = d.missing_mask() if include_missing else np.zeros(d.values.shape, dtype=bool)
    for i, ts in enumerate(_fmt_ts(d.timestamps)):
        row = [ts] + ["" if miss[c, i] else repr(float(d.values[c, i])) for c in range(d.n_channels)]
        if labels is not None:
            row.append(str(int(labels[i])))
        w.writerow(row)
    return buf.getvalue()


def write_dataset(d: CuratedDataset, path) -> None:
    Path(path).write_text(dataset_to_csv(d), encoding="utf-8")


def write_curated(result: CurationResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for d in result.datasets:
        fname = f"{d.name}.{d.split}.csv"
        d.files = [fname]
        write_dataset(d, out / fname)
    path = out / "manifest.json"
    path.write_text(json.dumps(result.manifest(), indent=2) + "\n", encoding="utf-8")
    return path


def dataset_from_table(t: RawTable, name: str, **meta) -> CuratedDataset:
    names = list(t.columns)
    values = np.stack([t.columns[k] for k in names])
    ts = t.timestamps
    period = float(np.round(ts[1] - ts[0], 6)) if len(ts) > 1 else meta.pop("sampling_period_ms", 1.0)
    missing = np.isnan(values)
    labels = None if t.labels is None else t.labels.astype(np.int64)
    return CuratedDataset(name, values, names, period, float(ts[0]), labels,
                          "per_timestep" if labels is not None else None,
                          missing=missing if missing.any() else None, **meta)


def load_curated(directory, split: str | None = None, task: str | None = None) -> list[CuratedDataset]:
    """Read datasets listed in ``manifest.json``, optionally filtered."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CurationError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    out = []
    for entry in manifest["datasets"]:
        if split and entry["split"] != split:
            continue
        if task and entry["task"] != task:
            continue
        t = ingest_csv(directory / entry["files"][0])
        d = dataset_from_table(t, entry["name"], split=entry["split"], task=entry["task"],
                               report=entry.get("curation_report", []), seed=entry.get("seed", 0),
                               files=entry["files"])
        d.sampling_period_ms = entry["sampling_period_ms"]
        d.label_kind = entry.get("label_kind")
        out.append(d)
    return out
