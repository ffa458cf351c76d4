"""Patch-token transformer encoder for multivariate telemetry windows.

Pipeline for one window ``x`` of shape ``(C, T)``::

    revin_normalize -> patchify -> project_patches -> [apply_mask]
        -> positional_encode -> encoder_forward -> head_*

All functions accept an optional leading batch axis, e.g. ``(B, C, T)``
windows or ``(B, C*N, d)`` token sequences.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .numerics import (
    DimensionError,
    Tensor,
    activation,
    as_tensor,
    get_dtype,
    grad_enabled,
    layer_norm,
    matmul,
    softmax_rows,
)

VARIANTS = {
    "small": dict(n_layers=6, d_model=512, n_heads=8, d_ff=2048),
    "base": dict(n_layers=12, d_model=768, n_heads=12, d_ff=3072),
    "large": dict(n_layers=24, d_model=1024, n_heads=16, d_ff=4096),
}

HEAD_PREFIX = "head."


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 768
    n_heads: int = 12
    d_ff: int = 3072
    window: int = 512
    patch_len: int = 8
    head_depth: int = 2
    activation: str = "relu"
    variant: str = "base"
    horizon: int | None = None
    n_classes: int | None = None
    norm_eps: float = 1e-5
    revin_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if not self.window >= self.patch_len >= 1:
            raise ValueError(f"need window >= patch_len >= 1, got T={self.window}, P={self.patch_len}")
        if self.head_depth < 1 or self.n_layers < 0:
            raise ValueError("head_depth must be >= 1 and n_layers >= 0")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.variant not in ("small", "base", "large", "custom"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.horizon is not None and self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_classes is not None and self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return cls(**{**VARIANTS[variant], "variant": variant, **overrides})

    @property
    def n_patches(self) -> int:
        return self.window // self.patch_len

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ParameterSet(dict):
    """Ordered mapping of parameter name to :class:`Tensor`."""

    def numel(self) -> int:
        return sum(t.size for t in self.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, Tensor(v.data.copy(), dtype=v.data.dtype)) for k, v in self.items())

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet((k, Tensor(v.data, dtype=dtype)) for k, v in self.items())

    def select(self, predicate) -> list[str]:
        return [k for k in self if predicate(k)]

    def digest(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the named tensors (all by default)."""
        h = hashlib.sha256()
        for name in (self if names is None else names):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self[name].data).tobytes())
        return h.hexdigest()


def is_head_param(name: str) -> bool:
    return name.startswith(HEAD_PREFIX)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-5


@dataclass
class TokenSequence:
    embeddings: Tensor
    n_channels: int
    n_patches: int
    masked: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.n_channels * self.n_patches
        if self.embeddings.shape[-2] != n:
            raise DimensionError(f"expected {n} tokens, got {self.embeddings.shape[-2]}")
        if self.masked is None:
            self.masked = np.zeros(self.embeddings.shape[:-1], dtype=bool)

    @property
    def n_tokens(self) -> int:
        return self.n_channels * self.n_patches

    @property
    def channel_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_channels), self.n_patches)

    @property
    def patch_of(self) -> np.ndarray:
        return np.tile(np.arange(self.n_patches), self.n_channels)

    def with_embeddings(self, emb: Tensor, masked: np.ndarray | None = None) -> "TokenSequence":
        return TokenSequence(emb, self.n_channels, self.n_patches,
                             self.masked if masked is None else masked)


# -- normalization and tokenization ---------------------------------------

def revin_normalize(x: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, NormStats]:
    """Per-channel standardization over the time axis (population std, floored at ``eps``)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("window must contain at least one sample")
    if np.isnan(x).any():
        raise ValueError("NaN in input; resolve missing values before normalizing")
    mean = x.mean(axis=-1)
    std = np.maximum(x.std(axis=-1), eps)
    return (x - mean[..., None]) / std[..., None], NormStats(mean, std, eps)


def revin_denormalize(y: np.ndarray, stats: NormStats) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[:-1] != stats.mean.shape:
        raise DimensionError(f"output channels {y.shape[:-1]} do not match stats {stats.mean.shape}")
    return y * stats.std[..., None] + stats.mean[..., None]


def patchify(x: np.ndarray, patch_len: int) -> np.ndarray:
    """Split ``(..., C, T)`` into ``(..., C, N, P)``, dropping the trailing ``T - N*P`` samples."""
    T = x.shape[-1]
    if T < patch_len:
        raise ValueError(f"window length {T} is shorter than patch length {patch_len}")
    n = T // patch_len
    return x[..., : n * patch_len].reshape(*x.shape[:-1], n, patch_len)


def project_patches(patches, weight: Tensor, bias: Tensor) -> TokenSequence:
    """Linear patch embedding; tokens are laid out channel-major."""
    patches = np.asarray(patches)
    *lead, C, N, P = patches.shape
    if weight.shape[0] != P:
        raise DimensionError(f"patch length {P} does not match projection input width {weight.shape[0]}")
    flat = Tensor(patches.reshape(*lead, C * N, P), dtype=weight.data.dtype)
    return TokenSequence(matmul(flat, weight) + bias, C, N)


def apply_mask(seq: TokenSequence, indices, mask_token: Tensor) -> TokenSequence:
    """Replace selected tokens by ``mask_token``.

    ``indices`` is either an iterable of token indices (unbatched) or a
    boolean array shaped like ``seq.masked``.
    """
    indices = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices)
    if indices.dtype == bool:
        if indices.shape != seq.masked.shape:
            raise DimensionError(f"mask shape {indices.shape} does not match {seq.masked.shape}")
        flags = indices.copy()
    else:
        indices = indices.astype(int).reshape(-1)
        if indices.size and (indices.min() < 0 or indices.max() >= seq.n_tokens):
            raise IndexError(f"mask index out of range for {seq.n_tokens} tokens")
        flags = np.zeros(seq.masked.shape, dtype=bool)
        flags[..., indices] = True
    if not flags.any():
        return seq.with_embeddings(seq.embeddings, seq.masked | flags)
    m = flags[..., None].astype(seq.embeddings.data.dtype)
    emb = seq.embeddings * Tensor(1.0 - m, dtype=m.dtype) + Tensor(m, dtype=m.dtype) * mask_token
    return seq.with_embeddings(emb, seq.masked | flags)


def sinusoidal_table(n_positions: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("sinusoidal positions need an even width")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((n_positions, d))
    table[:, 0::2] = np.sin(pos / freq)
    table[:, 1::2] = np.cos(pos / freq)
    return table


def positional_encode(seq: TokenSequence) -> TokenSequence:
    """Add the sinusoid of each token's temporal patch index (shared across channels)."""
    d = seq.embeddings.shape[-1]
    pe = sinusoidal_table(seq.n_patches, d)[seq.patch_of]
    return seq.with_embeddings(seq.embeddings + Tensor(pe, dtype=seq.embeddings.data.dtype))


# -- encoder ----------------------------------------------------------------

_CHUNK_ELEMS = 2 ** 24


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v over the last two axes, bidirectional."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shapes differ: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    n = q.shape[-2]
    if not grad_enabled() and q.size // q.shape[-1] * n > _CHUNK_ELEMS:
        return Tensor(_attention_chunked(q.data, k.data, v.data, scale), dtype=q.data.dtype)
    weights = softmax_rows(matmul(q, k.swap_last()) * scale)
    return matmul(weights, v)


def _attention_chunked(q, k, v, scale):
    # inference-only path bounding the n x n score buffer
    n = q.shape[-2]
    rows = max(1, _CHUNK_ELEMS // max(1, q.size // q.shape[-1] // n * n))
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype)
    kt = np.swapaxes(k, -1, -2)
    for start in range(0, n, rows):
        s = np.matmul(q[..., start:start + rows, :], kt) * q.dtype.type(scale)
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[..., start:start + rows, :] = np.matmul(s, v)
    return out


def _linear(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    return matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _self_attention(x: Tensor, params: ParameterSet, prefix: str, cfg: ModelConfig) -> Tensor:
    b, n, d = x.shape
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(t):
        return t.reshape(b, n, H, dh).transpose(0, 2, 1, 3)

    q = heads(_linear(x, params, f"{prefix}.wq"))
    k = heads(_linear(x, params, f"{prefix}.wk"))
    v = heads(_linear(x, params, f"{prefix}.wv"))
    out = attention(q, k, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return _linear(out, params, f"{prefix}.wo")


def encoder_forward(seq: TokenSequence, params: ParameterSet, cfg: ModelConfig) -> TokenSequence:
    """Pre-norm transformer stack followed by a final layer norm."""
    x = seq.embeddings
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"token width {x.shape[-1]} != d_model {cfg.d_model}")
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    eps = cfg.norm_eps
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h = layer_norm(x, params[f"{p}.ln_attn.gain"], params[f"{p}.ln_attn.bias"], eps)
        x = x + _self_attention(h, params, f"{p}.attn", cfg)
        h = layer_norm(x, params[f"{p}.ln_ffn.gain"], params[f"{p}.ln_ffn.bias"], eps)
        h = activation(_linear(h, params, f"{p}.ffn.up"), cfg.activation)
        x = x + _linear(h, params, f"{p}.ffn.down")
    x = layer_norm(x, params["ln_final.gain"], params["ln_final.bias"], eps)
    if unbatched:
        x = x.reshape(x.shape[1:])
    return seq.with_embeddings(x)


def mean_pool(z: TokenSequence) -> Tensor:
    if z.n_tokens == 0:
        raise ValueError("cannot pool an empty sequence")
    return z.embeddings.mean(axis=-2)


# -- heads --------------------------------------------------------------------

def _mlp(x: Tensor, params: ParameterSet, prefix: str, depth: int, kind: str) -> Tensor:
    for i in range(depth):
        x = _linear(x, params, f"{prefix}.{i}")
        if i < depth - 1:
            x = activation(x, kind)
    return x


def head_reconstruct(z: TokenSequence, params: ParameterSet, cfg: ModelConfig) -> Tensor:
    """Map every token back to its patch; returns ``(..., C, N*P)`` in normalized space."""
    out = _mlp(z.embeddings, params, "head.reconstruct", cfg.head_depth, cfg.activation)
    lead = out.shape[:-2]
    return out.reshape(*lead, z.n_channels, z.n_patches * out.shape[-1])


def head_forecast(z: TokenSequence, params: ParameterSet, cfg: ModelConfig) -> Tensor:
    """Flatten each channel's N tokens and project to ``H`` steps: ``(..., C, H)``."""
    if not cfg.horizon:
        raise ValueError("model has no forecast head (horizon unset)")
    emb = z.embeddings
    lead = emb.shape[:-2]
    flat = emb.reshape(*lead, z.n_channels, z.n_patches * emb.shape[-1])
    w = params["head.forecast.0.weight"]
    if w.shape[0] != flat.shape[-1]:
        raise DimensionError(f"forecast head expects {w.shape[0]} inputs, got {flat.shape[-1]}")
    return _mlp(flat, params, "head.forecast", cfg.head_depth, cfg.activation)


def head_classify(z: Tensor, params: ParameterSet, cfg: ModelConfig) -> Tensor:
    if not cfg.n_classes or cfg.n_classes < 2:
        raise ValueError("classification needs at least two classes")
    z = as_tensor(z)
    if z.ndim == 1:
        return _mlp(z.reshape(1, -1), params, "head.classify", cfg.head_depth, cfg.activation).reshape(-1)
    return _mlp(z, params, "head.classify", cfg.head_depth, cfg.activation)


# -- parameters ---------------------------------------------------------------

def _mlp_shapes(prefix: str, d_in: int, d_hidden: int, d_out: int, depth: int) -> dict:
    dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
    shapes = {}
    for i in range(depth):
        shapes[f"{prefix}.{i}.weight"] = (dims[i], dims[i + 1])
        shapes[f"{prefix}.{i}.bias"] = (dims[i + 1],)
    return shapes


def param_shapes(cfg: ModelConfig, reconstruct: bool = True) -> dict[str, tuple]:
    """Name -> shape for every parameter implied by ``cfg`` (insertion ordered)."""
    d, P = cfg.d_model, cfg.patch_len
    shapes = {"proj.weight": (P, d), "proj.bias": (d,), "mask_token": (d,)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln_attn.gain"] = (d,)
        shapes[f"{p}.ln_attn.bias"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}.weight"] = (d, d)
            shapes[f"{p}.attn.{w}.bias"] = (d,)
        shapes[f"{p}.ln_ffn.gain"] = (d,)
        shapes[f"{p}.ln_ffn.bias"] = (d,)
        shapes[f"{p}.ffn.up.weight"] = (d, cfg.d_ff)
        shapes[f"{p}.ffn.up.bias"] = (cfg.d_ff,)
        shapes[f"{p}.ffn.down.weight"] = (cfg.d_ff, d)
        shapes[f"{p}.ffn.down.bias"] = (d,)
    shapes["ln_final.gain"] = (d,)
    shapes["ln_final.bias"] = (d,)
    if reconstruct:
        shapes.update(_mlp_shapes("head.reconstruct", d, d, P, cfg.head_depth))
    if cfg.horizon:
        shapes.update(_mlp_shapes("head.forecast", cfg.n_patches * d, d, cfg.horizon, cfg.head_depth))
    if cfg.n_classes:
        shapes.update(_mlp_shapes("head.classify", d, d, cfg.n_classes, cfg.head_depth))
    return shapes


def _init_tensor(name: str, shape: tuple, rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(".weight"):
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    return np.zeros(shape, dtype=dtype)


def init_params(cfg: ModelConfig, seed: int = 0, reconstruct: bool = True) -> ParameterSet:
    """Xavier-uniform weights, zero biases and mask token, unit norm gains."""
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    return ParameterSet(
        (name, Tensor(_init_tensor(name, shape, rng, dtype), dtype=dtype))
        for name, shape in param_shapes(cfg, reconstruct).items()
    )


def init_head(params: ParameterSet, cfg: ModelConfig, head: str, seed: int = 0) -> ParameterSet:
    """Return a copy of ``params`` whose ``head`` parameters are freshly initialized.

    Parameters of other heads and of the backbone are shared, not copied.
    """
    rng = np.random.default_rng(seed)
    prefix = f"head.{head}."
    out = ParameterSet((k, v) for k, v in params.items() if not k.startswith(prefix))
    dtype = next(iter(params.values())).data.dtype
    for name, shape in param_shapes(cfg).items():
        if name.startswith(prefix):
            out[name] = Tensor(_init_tensor(name, shape, rng, dtype), dtype=dtype)
    return out


def param_count(cfg: ModelConfig, horizon: int | None = None, n_classes: int | None = None,
                reconstruct: bool = True) -> int:
    """Exact scalar count of the parameter set with the requested heads attached."""
    d, P, M, F = cfg.d_model, cfg.patch_len, cfg.head_depth, cfg.d_ff

    def mlp(d_in, d_out):
        dims = [d_in] + [d] * (M - 1) + [d_out]
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    total = P * d + d + d + 2 * d
    total += cfg.n_layers * encoder_layer_count(d, F)
    if reconstruct:
        total += mlp(d, P)
    if horizon:
        total += mlp(cfg.n_patches * d, horizon)
    if n_classes:
        total += mlp(d, n_classes)
    return total


def encoder_layer_count(d: int, d_ff: int) -> int:
    return 4 * d * d + 4 * d + 2 * d * d_ff + d_ff + d + 4 * d


# -- convenience wrapper ----------------------------------------------------

@dataclass
class Model:
    """A config and its parameters, with the end-to-end task paths."""

    cfg: ModelConfig
    params: ParameterSet

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    def encode(self, x_norm: np.ndarray, mask=None) -> TokenSequence:
        """Tokens for normalized windows ``(..., C, T)``; ``mask`` selects tokens to hide."""
        seq = project_patches(patchify(x_norm, self.cfg.patch_len),
                              self.params["proj.weight"], self.params["proj.bias"])
        if mask is not None:
            seq = apply_mask(seq, mask, self.params["mask_token"])
        seq = positional_encode(seq)
        return encoder_forward(seq, self.params, self.cfg)

    def reconstruct(self, x_norm: np.ndarray, mask=None) -> Tensor:
        return head_reconstruct(self.encode(x_norm, mask), self.params, self.cfg)

    def forecast(self, x_norm: np.ndarray) -> Tensor:
        return head_forecast(self.encode(x_norm), self.params, self.cfg)

    def pooled(self, x_norm: np.ndarray) -> Tensor:
        return mean_pool(self.encode(x_norm))

    def classify(self, x_norm: np.ndarray) -> Tensor:
        return head_classify(self.pooled(x_norm), self.params, self.cfg)
