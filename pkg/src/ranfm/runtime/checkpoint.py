"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TRNK"                     magic
    u32 version                 = 1
    u32 n, n bytes              UTF-8 JSON: {"model": ..., "train": ..., "extra": ...}
    u32 tensor count
    per tensor:
        u16 n, n bytes          name (UTF-8)
        u8 rank
        rank x u32              dims
        u8 dtype                0 = float32, 1 = float64
        raw row-major data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..model import ModelConfig, ParameterSet, param_shapes
from ..numerics import Tensor
from ..training import TrainConfig

MAGIC = b"TRNK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ParameterSet, model_cfg: ModelConfig,
                      train_cfg: TrainConfig | None = None, extra: dict | None = None) -> bytes:
    config = {"model": model_cfg.to_dict(),
              "train": train_cfg.to_dict() if train_cfg is not None else None,
              "extra": extra or {}}
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, t in params.items():
        data = t.data
        if data.dtype not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {data.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        code = DTYPE_CODES[data.dtype]
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(data, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: ParameterSet, model_cfg: ModelConfig,
                    train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, model_cfg, train_cfg, extra))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> tuple[ParameterSet, ModelConfig, TrainConfig | None, dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n, = r.unpack("<I")
    try:
        config = json.loads(r.take(n).decode("utf-8"))
        model_cfg = ModelConfig.from_dict(config["model"])
        train_cfg = TrainConfig.from_dict(config["train"]) if config.get("train") else None
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable config blob: {exc}") from exc
    count, = r.unpack("<I")
    params = ParameterSet()
    for _ in range(count):
        name_len, = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        rank, = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        code, = r.unpack("<B")
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dtype = DTYPES[code]
        numel = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(numel * dtype.itemsize), dtype=dtype).reshape(dims)
        if name in params:
            raise CheckpointError(f"duplicate tensor {name}")
        params[name] = Tensor(data.astype(dtype.newbyteorder("="), copy=True), dtype=data.dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    _validate(params, model_cfg)
    return params, model_cfg, train_cfg, config.get("extra") or {}


def _validate(params: ParameterSet, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg, reconstruct="head.reconstruct.0.weight" in params)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        unknown = sorted(set(params) - set(expected))
        raise CheckpointError(f"tensors inconsistent with config; missing={missing[:3]} unknown={unknown[:3]}")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise CheckpointError(f"{name}: shape {params[name].shape} != expected {shape}")


def load_checkpoint(path):
    """Returns ``(params, model_cfg, train_cfg, extra)``."""
    return decode_checkpoint(Path(path).read_bytes())


def expected_size(params: ParameterSet, config_json_len: int) -> int:
    """Byte size of an encoded checkpoint, from the format alone."""
    total = 4 + 4 + 4 + config_json_len + 4
    for name, t in params.items():
        total += 2 + len(name.encode()) + 1 + 4 * t.ndim + 1 + t.data.itemsize * t.size
    return total
