"""Task adapters and evaluation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Model, revin_denormalize, revin_normalize
from .numerics import no_grad
from .training import UnsupportedRegime, window_label

TASK_REGIMES = {
    "anomaly": ("zero", "lp", "ff"),
    "impute": ("zero", "lp", "ff"),
    "classify": ("lp", "ff"),
    "forecast": ("lp", "ff"),
}
DEFAULT_HORIZONS = (32, 64, 128, 208)
DEFAULT_MASK_RATIOS = (0.10, 0.30, 0.50)


class ChannelUnimputable(ValueError):
    pass


@dataclass
class EvalReport:
    task: str
    dataset: str
    regime: str
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")

    def to_dict(self) -> dict:
        return {"task": self.task, "dataset": self.dataset, "regime": self.regime,
                "metrics": {k: float(v) for k, v in self.metrics.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["task"], d["dataset"], d["regime"], dict(d["metrics"]))


# -- anomaly detection ------------------------------------------------------

def anomaly_score(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Squared reconstruction error averaged over channels, per timestep."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return ((x - x_hat) ** 2).mean(axis=-2)


def label_segments(labels: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of 1s as half-open ``(start, stop)`` pairs."""
    lab = np.asarray(labels).astype(np.int8)
    edges = np.diff(np.concatenate([[0], lab, [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def adjusted_best_f1(scores, labels) -> tuple[float, float]:
    """Best point-adjusted F1 over all distinct score thresholds.

    Prediction is ``score >= tau``. A labeled segment with any predicted
    timestep counts as fully detected. Ties resolve to the smallest tau.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive labels; recall is undefined")

    thresholds = np.unique(scores)
    # a segment is detected at tau iff its max score >= tau
    segs = label_segments(labels)
    seg_max = np.array([scores[a:b].max() for a, b in segs])
    seg_len = np.array([b - a for a, b in segs])
    order = np.argsort(seg_max)
    seg_max, seg_len = seg_max[order], seg_len[order]
    detected_len = np.concatenate([np.cumsum(seg_len[::-1])[::-1], [0]])
    tp = detected_len[np.searchsorted(seg_max, thresholds, side="left")]

    neg = np.sort(scores[labels == 0])
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    fn = n_pos - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(tp > 0, (2 * tp) / np.maximum(denom, 1), 0.0)
    best = int(np.argmax(f1))  # first max = smallest threshold
    return float(f1[best]), float(thresholds[best])


# -- classification ---------------------------------------------------------

def precision_recall_f1(pred, truth, averaging: str = "macro", positive: int = 1,
                        labels: Sequence[int] | None = None) -> tuple[float, float, float]:
    """Precision, recall and F1; zero-division yields 0."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")

    def prf(c):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        return p, r, f

    if averaging == "binary":
        return prf(positive)
    if averaging != "macro":
        raise ValueError(f"unknown averaging {averaging!r}")
    classes = np.union1d(pred, truth) if labels is None else np.asarray(labels)
    rows = np.array([prf(c) for c in classes])
    return tuple(float(v) for v in rows.mean(axis=0))


# -- regression metrics -----------------------------------------------------

def mse_mae(y, y_hat, mask=None) -> tuple[float, float]:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    err = y_hat - y
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    if err.size == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(err ** 2)), float(np.mean(np.abs(err)))


# -- imputation -------------------------------------------------------------

BASELINES = ("forward_fill", "mean", "nearest", "linear", "rolling_mean")


def baseline_impute(x, missing, kind: str, window: int = 5) -> np.ndarray:
    """Fill missing samples channel by channel with a classical rule."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    x = np.array(x, dtype=np.float64, copy=True)
    missing = np.asarray(missing, dtype=bool)
    single = x.ndim == 1
    if single:
        x, missing = x[None], missing[None]
    T = x.shape[-1]
    for c in range(x.shape[0]):
        miss = missing[c]
        if not miss.any():
            continue
        obs = np.flatnonzero(~miss)
        if obs.size == 0:
            raise ChannelUnimputable(f"channel {c} has no observed values")
        vals = x[c, obs]
        gaps = np.flatnonzero(miss)
        if kind == "forward_fill":
            pos = np.searchsorted(obs, gaps, side="right") - 1
            x[c, gaps] = vals[np.maximum(pos, 0)]
        elif kind == "mean":
            x[c, gaps] = vals.mean()
        elif kind == "nearest":
            right = np.clip(np.searchsorted(obs, gaps), 0, obs.size - 1)
            left = np.clip(right - 1, 0, obs.size - 1)
            use_left = np.abs(gaps - obs[left]) <= np.abs(obs[right] - gaps)
            x[c, gaps] = np.where(use_left, vals[left], vals[right])
        elif kind == "linear":
            x[c, gaps] = np.interp(gaps, obs, vals)
        else:
            half = window // 2
            mean = vals.mean()
            for g in gaps:
                lo, hi = max(0, g - half), min(T, g + half + 1)
                seen = ~miss[lo:hi]
                x[c, g] = x[c, lo:hi][seen].mean() if seen.any() else mean
    return x[0] if single else x


def _window_starts(length: int, window: int) -> list[int]:
    """Non-overlapping windows plus one aligned to the series end."""
    starts = list(range(0, length - window + 1, window))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def impute(x, missing, model: Model) -> np.ndarray:
    """Fill missing samples of ``(C, L)`` with the reconstruction head (L >= window).

    Observed samples are returned bit-exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool) | np.isnan(x)
    if x.ndim != 2:
        raise ValueError("impute expects a (C, L) array")
    if missing.all(axis=-1).any():
        bad = np.flatnonzero(missing.all(axis=-1)).tolist()
        raise ChannelUnimputable(f"channels {bad} are entirely missing")
    out = x.copy()
    if not missing.any():
        return out
    cfg = model.cfg
    T, P, N = cfg.window, cfg.patch_len, cfg.n_patches
    if x.shape[-1] < T:
        raise ValueError(f"need at least {T} samples, got {x.shape[-1]}")
    prefilled = baseline_impute(np.where(missing, 0.0, x), missing, "linear")
    filled = prefilled.copy()
    starts = _window_starts(x.shape[-1], T)
    wins = np.stack([prefilled[:, s:s + T] for s in starts])
    miss = np.stack([missing[:, s:s + T] for s in starts])
    x_norm, stats = revin_normalize(wins, cfg.revin_eps)
    tmask = miss[..., : N * P].reshape(len(starts), -1, N, P).any(axis=-1).reshape(len(starts), -1)
    with no_grad():
        rec = revin_denormalize(model.reconstruct(x_norm, tmask).data, stats)
    for w, s in enumerate(starts):
        filled[:, s:s + N * P] = rec[w]
    return np.where(missing, filled, out)


def patch_missing_mask(shape: tuple, patch_len: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Hide ``round(ratio * n_patches)`` whole patches in each channel."""
    C, L = shape
    n = L // patch_len
    mask = np.zeros(shape, dtype=bool)
    k = int(round(ratio * n))
    for c in range(C):
        for i in rng.choice(n, size=k, replace=False):
            mask[c, i * patch_len:(i + 1) * patch_len] = True
    return mask


# -- embeddings ---------------------------------------------------------------

@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray


def pca(embeddings, n_components: int = 2, tol: float = 1e-8, max_iter: int = 1000,
        seed: int = 0) -> PCAResult:
    """Top principal directions by power iteration with deflation."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        raise ValueError("all embeddings are identical (rank 0)")
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    d = cov.shape[0]
    rng = np.random.default_rng(seed)
    comps, eigs = [], []
    work = cov.copy()
    scale = np.abs(cov).max()
    for _ in range(min(n_components, d)):
        v = rng.standard_normal(d)
        v = _orthogonalize(v, comps)
        for _ in range(max_iter):
            w = _orthogonalize(work @ v, comps)
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * scale:
                w, norm = _orthogonalize(v, comps), 0.0
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        v = v / np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        lam = max(float(v @ cov @ v), 0.0)
        comps.append(v)
        eigs.append(lam)
        work = work - lam * np.outer(v, v)
    W = np.array(comps)
    return PCAResult(Xc @ W.T, W, np.array(eigs), mean)


def _orthogonalize(v, basis):
    for b in basis:
        v = v - (v @ b) * b
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def pca_project(embeddings, components: int = 2) -> np.ndarray:
    return pca(embeddings, components).coords


# -- end-to-end evaluation ----------------------------------------------------

def _check_regime(task: str, regime: str) -> None:
    if task not in TASK_REGIMES:
        raise ValueError(f"unknown task {task!r}")
    if regime not in TASK_REGIMES[task]:
        raise UnsupportedRegime(f"{task} does not support regime {regime!r}")


def anomaly_scores_series(model: Model, values: np.ndarray) -> np.ndarray:
    """Per-timestep scores over a whole series via unmasked reconstruction."""
    cfg = model.cfg
    T, NP = cfg.window, cfg.n_patches * cfg.patch_len
    L = values.shape[-1]
    if L < T:
        raise ValueError(f"series of length {L} is shorter than the window {T}")
    scores = np.zeros(L)
    starts = _window_starts(L, T)
    wins = np.stack([values[:, s:s + T] for s in starts])
    x_norm, _ = revin_normalize(wins, cfg.revin_eps)
    with no_grad():
        rec = model.reconstruct(x_norm).data
    per = anomaly_score(x_norm[..., :NP], rec)
    for w, s in enumerate(starts):
        scores[s:s + NP] = per[w]
        if NP < T and w == len(starts) - 1:
            scores[s + NP:s + T] = per[w, -1]
    return scores


def classify_windows(model: Model, values: np.ndarray, stride: int | None = None,
                     batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    cfg = model.cfg
    starts = np.arange(0, values.shape[-1] - cfg.window + 1, stride or cfg.window)
    preds = []
    for i in range(0, len(starts), batch):
        wins = np.stack([values[:, s:s + cfg.window] for s in starts[i:i + batch]])
        x_norm, _ = revin_normalize(wins, cfg.revin_eps)
        with no_grad():
            preds.append(np.argmax(model.classify(x_norm).data, axis=-1))
    return starts, np.concatenate(preds)


def evaluate(model: Model, dataset, task: str, regime: str, horizons=None, mask_ratios=None,
             seed: int = 0, averaging: str | None = None) -> EvalReport:
    """Score ``model`` on a test dataset with the metrics for ``task``."""
    _check_regime(task, regime)
    split = getattr(dataset, "split", "test")
    if split not in ("test", None):
        raise ValueError(f"evaluation needs a test split, got {split!r}")
    values = dataset.filled_values()
    cfg = model.cfg
    metrics: dict[str, float] = {}
    if task == "anomaly":
        if dataset.labels is None:
            raise ValueError("anomaly evaluation needs per-timestep labels")
        f1, tau = adjusted_best_f1(anomaly_scores_series(model, values), dataset.labels)
        metrics = {"adjusted_best_f1": f1, "best_threshold": tau}
    elif task == "classify":
        if dataset.labels is None:
            raise ValueError("classification evaluation needs labels")
        starts, pred = classify_windows(model, values)
        truth = np.array([window_label(dataset.labels, s, cfg.window) for s in starts])
        mode = averaging or ("binary" if cfg.n_classes == 2 else "macro")
        p, r, f = precision_recall_f1(pred, truth, mode, labels=range(cfg.n_classes))
        metrics = {"precision": p, "recall": r, "f1": f}
    elif task == "forecast":
        H = cfg.horizon
        if not H:
            raise ValueError("model has no forecast head")
        hs = [h for h in (horizons or DEFAULT_HORIZONS) if h <= H] or [H]
        T = cfg.window
        starts = np.arange(0, values.shape[-1] - T - H + 1, H)
        if starts.size == 0:
            raise ValueError("test series too short for forecasting evaluation")
        wins = np.stack([values[:, s:s + T + H] for s in starts])
        x_norm, stats = revin_normalize(wins[..., :T], cfg.revin_eps)
        with no_grad():
            pred = revin_denormalize(model.forecast(x_norm).data, stats)
        for h in hs:
            mse, mae = mse_mae(wins[..., T:T + h], pred[..., :h])
            metrics[f"mse@{h}"] = mse
            metrics[f"mae@{h}"] = mae
    else:
        rng = np.random.default_rng(seed)
        observed = ~dataset.missing_mask()
        for ratio in (mask_ratios or DEFAULT_MASK_RATIOS):
            hide = patch_missing_mask(values.shape, cfg.patch_len, ratio, rng) & observed
            filled = impute(np.where(hide, np.nan, values), hide | ~observed, model)
            mse, mae = mse_mae(values, filled, hide)
            tag = f"{round(ratio * 100)}%"
            metrics[f"mse@{tag}"] = mse
            metrics[f"mae@{tag}"] = mae
    return EvalReport(task, getattr(dataset, "name", "dataset"), regime, metrics)
