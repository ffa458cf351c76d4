"""Masked-reconstruction pretraining and task adaptation."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .model import Model, ModelConfig, ParameterSet, init_head, is_head_param, revin_normalize
from .numerics import Tensor, backward, log_softmax_rows

log = logging.getLogger(__name__)

REGIMES = ("pretrain", "ff", "lp", "zero")
TASKS = ("anomaly", "classify", "forecast", "impute")


class ContractError(ValueError):
    """A documented precondition was violated."""


class TrainingDivergence(ArithmeticError):
    """Non-finite gradients or parameters during training."""


class UnsupportedRegime(ValueError):
    pass


@dataclass
class TrainConfig:
    mask_ratio: float = 0.30
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 32
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    total_steps: int = 1000
    strides: tuple | None = None  # None: pick per dataset size
    seed: int = 0
    regime: str = "pretrain"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError("need lr_max >= lr_min > 0")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be positive")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.strides is not None:
            self.strides = tuple(int(s) for s in self.strides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strides"] = list(self.strides) if self.strides is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


# -- primitives -------------------------------------------------------------

def select_mask_indices(n_tokens: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``round(ratio * n_tokens)`` distinct indices, uniform without replacement."""
    if n_tokens < 1:
        raise ValueError("need at least one token")
    k = int(round(ratio * n_tokens))
    return np.sort(rng.choice(n_tokens, size=k, replace=False))


def token_mask_to_samples(token_mask: np.ndarray, n_channels: int, n_patches: int,
                          patch_len: int) -> np.ndarray:
    """Boolean ``(..., C*N)`` token mask -> boolean ``(..., C, N*P)`` sample mask."""
    lead = token_mask.shape[:-1]
    m = token_mask.reshape(*lead, n_channels, n_patches, 1)
    return np.broadcast_to(m, (*lead, n_channels, n_patches, patch_len)).reshape(
        *lead, n_channels, n_patches * patch_len)


def masked_mse(x, x_hat, mask: np.ndarray):
    """Mean squared error over the samples flagged in ``mask``.

    ``x_hat`` may be a :class:`Tensor` (returns a differentiable scalar) or
    an array (returns a float).
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("masked_mse needs at least one masked position")
    if isinstance(x_hat, Tensor):
        dtype = x_hat.data.dtype
        diff = x_hat - Tensor(np.asarray(x), dtype=dtype)
        return (diff.square() * Tensor(mask, dtype=dtype)).sum() / count
    err = np.asarray(x_hat, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float((err[mask] ** 2).mean())


def cosine_lr(t: float, total_steps: int, lr_max: float, lr_min: float) -> float:
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise TrainingDivergence("non-finite gradient norm")
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}


def decays(name: str) -> bool:
    """Weight decay skips layer-norm parameters and the mask token."""
    if name == "mask_token":
        return False
    parts = name.split(".")
    return not (len(parts) >= 2 and parts[-2].startswith("ln_"))


def adamw_step(params: ParameterSet, grads: dict, state: OptimizerState, lr: float,
               cfg: TrainConfig) -> tuple[ParameterSet, OptimizerState]:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Only names present in ``grads`` are updated.
    """
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for {name}")
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype)
        if not np.all(np.isfinite(p)):
            raise TrainingDivergence(f"non-finite parameter {name}")
    return params, state


def window_iter(values: np.ndarray, window: int, stride: int = 1) -> Iterator[np.ndarray]:
    """Yield ``(C, window)`` slices at offsets 0, stride, 2*stride, ..."""
    length = values.shape[-1]
    if length < window:
        raise ValueError(f"series of length {length} is shorter than window {window}")
    for start in range(0, length - window + 1, stride):
        yield values[..., start:start + window]


def window_offsets(length: int, window: int, stride: int) -> np.ndarray:
    if length < window:
        raise ValueError(f"series of length {length} is shorter than window {window}")
    return np.arange(0, length - window + 1, stride)


def dataset_weights(sizes: Sequence[int]) -> np.ndarray:
    if len(sizes) == 0:
        raise ValueError("no datasets")
    inv = 1.0 / np.asarray(sizes, dtype=np.float64)
    if np.any(~np.isfinite(inv)) or np.any(inv <= 0):
        raise ValueError("dataset sizes must be >= 1")
    return inv / inv.sum()


def stride_for_size(n_samples: int) -> int:
    if n_samples < 100_000:
        return 1
    if n_samples < 1_000_000:
        return 2
    return 4


# -- loops ------------------------------------------------------------------

@dataclass
class LossCurve:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step: int, lr: float, loss: float) -> None:
        self.steps.append(step)
        self.lrs.append(lr)
        self.losses.append(loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss"])
            for row in zip(self.steps, self.lrs, self.losses):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


@dataclass
class TrainResult:
    model: Model
    curve: LossCurve
    state: OptimizerState


class _WindowSampler:
    """Draws batches of raw windows; source dataset chosen by inverse-size weights."""

    def __init__(self, series: list[np.ndarray], window: int, cfg: TrainConfig, extra: int = 0):
        self.series = [s for s in series if s.shape[-1] >= window + extra]
        if not self.series:
            raise ValueError(f"every series is shorter than the window ({window + extra})")
        self.window, self.extra = window, extra
        self.offsets = []
        for s in self.series:
            stride = stride_for_size(s.shape[-1]) if cfg.strides is None else _pick_stride(cfg.strides, s.shape[-1])
            self.offsets.append(window_offsets(s.shape[-1], window + extra, stride))
        self.weights = dataset_weights([s.shape[-1] for s in self.series])

    def draw(self, rng: np.random.Generator, batch: int) -> tuple[int, np.ndarray, np.ndarray]:
        src = int(rng.choice(len(self.series), p=self.weights))
        offs = self.offsets[src]
        picks = rng.choice(offs.size, size=batch, replace=offs.size < batch)
        starts = offs[np.sort(picks)]
        span = self.window + self.extra
        wins = np.stack([self.series[src][:, s:s + span] for s in starts])
        return src, starts, wins


def _pick_stride(strides: tuple, n: int) -> int:
    # configured set, bucketed by size like stride_for_size
    ordered = sorted(strides)
    bucket = {1: 0, 2: 1, 4: 2}[stride_for_size(n)]
    return ordered[min(bucket, len(ordered) - 1)]


def _series_of(datasets) -> list[np.ndarray]:
    out = []
    for d in datasets:
        out.append(d.filled_values() if hasattr(d, "filled_values") else np.asarray(d, dtype=np.float64))
    return out


def _train_loop(model: Model, trainable: list[str], cfg: TrainConfig,
                batch_loss: Callable[[np.random.Generator], Tensor],
                on_step: Callable | None = None) -> TrainResult:
    params = model.params
    leaves = [params[n] for n in trainable]
    for name, p in params.items():
        p.requires_grad = name in trainable
    state = OptimizerState()
    curve = LossCurve()
    rng = np.random.default_rng(cfg.seed)
    last = max(cfg.total_steps - 1, 1)
    try:
        for step in range(cfg.total_steps):
            lr = cosine_lr(min(step, last), last, cfg.lr_max, cfg.lr_min)
            loss = batch_loss(rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"loss became {value} at step {step + 1}")
            backward(loss, leaves=leaves)
            grads = {n: params[n].grad for n in trainable}
            grads = clip_gradients(grads, cfg.clip_norm)
            adamw_step(params, grads, state, lr, cfg)
            curve.append(step + 1, lr, value)
            if on_step is not None:
                on_step(step + 1, lr, value)
            log.debug("step %d lr %.3g loss %.6f", step + 1, lr, value)
    finally:
        for p in params.values():
            p.requires_grad = False
            p.grad = None
    return TrainResult(model, curve, state)


def _reconstruction_loss(model: Model, sampler: _WindowSampler, cfg: TrainConfig):
    mcfg = model.cfg

    def batch_loss(rng):
        _, _, wins = sampler.draw(rng, cfg.batch_size)
        x_norm, _ = revin_normalize(wins, mcfg.revin_eps)
        C, N, P = x_norm.shape[1], mcfg.n_patches, mcfg.patch_len
        tmask = np.zeros((len(wins), C * N), dtype=bool)
        for b in range(len(wins)):
            tmask[b, select_mask_indices(C * N, cfg.mask_ratio, rng)] = True
        x_hat = model.reconstruct(x_norm, tmask)
        smask = token_mask_to_samples(tmask, C, N, P)
        return masked_mse(x_norm[..., : N * P], x_hat, smask)

    return batch_loss


def _check_mask_ratio(cfg: TrainConfig, mcfg: ModelConfig, n_channels: int) -> None:
    if int(round(cfg.mask_ratio * n_channels * mcfg.n_patches)) == 0:
        raise ContractError("mask ratio selects no tokens; the masked loss would be empty")


def pretrain(corpus: Sequence, model: Model, cfg: TrainConfig,
             on_step: Callable | None = None) -> TrainResult:
    """Masked patch reconstruction over a multi-dataset corpus.

    ``corpus`` holds curated datasets (or raw ``(C, T)`` arrays). Anomaly
    detection datasets are not allowed. The model is trained in place on a
    copy of its parameters; the input model is left untouched.
    """
    if not corpus:
        raise ValueError("empty corpus")
    for d in corpus:
        if getattr(d, "task", None) == "anomaly":
            raise ContractError(f"anomaly-detection dataset {d.name!r} must not be used for pretraining")
    series = _series_of(corpus)
    for s in series:
        _check_mask_ratio(cfg, model.cfg, s.shape[0])
    work = Model(model.cfg, model.params.copy())
    sampler = _WindowSampler(series, work.cfg.window, cfg)
    return _train_loop(work, list(work.params), cfg, _reconstruction_loss(work, sampler, cfg), on_step)


def _majority(labels: np.ndarray) -> int:
    vals, counts = np.unique(labels, return_counts=True)
    return int(vals[np.argmax(counts)])


def window_label(labels, start: int, span: int) -> int:
    labels = np.asarray(labels)
    if labels.ndim == 0:
        return int(labels)
    return _majority(labels[start:start + span])


def finetune(model: Model, task: str, regime: str, datasets: Sequence, cfg: TrainConfig,
             horizon: int | None = None, n_classes: int | None = None,
             on_step: Callable | None = None) -> TrainResult:
    """Adapt a (pre)trained model to ``task``.

    Regimes: ``ff`` trains everything, ``lp`` trains only the task head,
    ``zero`` performs no updates (reconstruction tasks only).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if regime not in ("ff", "lp", "zero"):
        raise UnsupportedRegime(f"unknown regime {regime!r}")
    if regime == "zero":
        if task in ("classify", "forecast"):
            raise UnsupportedRegime(f"zero-shot is only supported for anomaly and impute, not {task}")
        return TrainResult(Model(model.cfg, model.params.copy()), LossCurve(), OptimizerState())
    if not datasets:
        raise ValueError("no training data")

    mcfg = model.cfg
    params = model.params.copy()
    head = {"anomaly": "reconstruct", "impute": "reconstruct"}.get(task, task)
    if task == "forecast":
        h = horizon or mcfg.horizon
        if not h:
            raise ValueError("forecasting needs a horizon")
        if h != mcfg.horizon or "head.forecast.0.weight" not in params:
            mcfg = mcfg.replace(horizon=h)
            params = init_head(params, mcfg, "forecast", cfg.seed)
    elif task == "classify":
        k = n_classes or mcfg.n_classes or _infer_classes(datasets)
        if k != mcfg.n_classes or "head.classify.0.weight" not in params:
            mcfg = mcfg.replace(n_classes=k)
            params = init_head(params, mcfg, "classify", cfg.seed)
    work = Model(mcfg, params)
    prefix = f"head.{head}."
    trainable = [n for n in params if n.startswith(prefix)] if regime == "lp" else list(params)

    series = _series_of(datasets)
    if task in ("anomaly", "impute"):
        for s in series:
            _check_mask_ratio(cfg, mcfg, s.shape[0])
        sampler = _WindowSampler(series, mcfg.window, cfg)
        loss_fn = _reconstruction_loss(work, sampler, cfg)
    elif task == "forecast":
        sampler = _WindowSampler(series, mcfg.window, cfg, extra=mcfg.horizon)
        loss_fn = _forecast_loss(work, sampler, cfg)
    else:
        labels = [d.labels for d in datasets]
        if any(lab is None for lab in labels):
            raise ValueError("classification datasets need labels")
        sampler = _WindowSampler(series, mcfg.window, cfg)
        kept = [lab for s, lab in zip(series, labels) if s.shape[-1] >= mcfg.window]
        loss_fn = _classification_loss(work, sampler, kept, cfg)
    return _train_loop(work, trainable, cfg, loss_fn, on_step)


def _infer_classes(datasets) -> int:
    seen = set()
    for d in datasets:
        if d.labels is not None:
            seen.update(np.unique(np.asarray(d.labels)).tolist())
    return max(2, int(max(seen)) + 1) if seen else 2


def _forecast_loss(model: Model, sampler: _WindowSampler, cfg: TrainConfig):
    T, H = model.cfg.window, model.cfg.horizon

    def batch_loss(rng):
        _, _, wins = sampler.draw(rng, cfg.batch_size)
        x_norm, stats = revin_normalize(wins[..., :T], model.cfg.revin_eps)
        target = (wins[..., T:T + H] - stats.mean[..., None]) / stats.std[..., None]
        pred = model.forecast(x_norm)
        return masked_mse(target, pred, np.ones(target.shape, dtype=bool))

    return batch_loss


def _classification_loss(model: Model, sampler: _WindowSampler, labels: list, cfg: TrainConfig):
    K, T = model.cfg.n_classes, model.cfg.window

    def batch_loss(rng):
        src, starts, wins = sampler.draw(rng, cfg.batch_size)
        y = np.array([window_label(labels[src], s, T) for s in starts])
        x_norm, _ = revin_normalize(wins, model.cfg.revin_eps)
        return cross_entropy(model.classify(x_norm), y, K)

    return batch_loss


def cross_entropy(logits: Tensor, targets: np.ndarray, n_classes: int) -> Tensor:
    onehot = np.eye(n_classes)[np.asarray(targets, dtype=int)]
    logp = log_softmax_rows(logits)
    return -(logp * Tensor(onehot, dtype=logp.data.dtype)).sum() / len(targets)


def frozen_names(params: ParameterSet, head: str) -> list[str]:
    """Names left untouched by linear probing of ``head``."""
    return [n for n in params if not n.startswith(f"head.{head}.")]


__all__ = [
    "TrainConfig", "OptimizerState", "LossCurve", "TrainResult",
    "ContractError", "TrainingDivergence", "UnsupportedRegime",
    "select_mask_indices", "token_mask_to_samples", "masked_mse", "cosine_lr",
    "clip_gradients", "global_norm", "adamw_step", "decays", "window_iter", "window_offsets",
    "dataset_weights", "stride_for_size", "pretrain", "finetune", "cross_entropy",
    "window_label", "frozen_names", "is_head_param",
]
