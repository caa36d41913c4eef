"""Parameter init, RMSProp and the ECKP checkpoint format.

ECKP layout (little-endian)::

    b"ECKP" | u32 version=1 | u32 n_tensors
    repeated: u32 name_len | name (utf-8) | u32 dtype tag (1 = f64)
              | u32 rank | u32 dims[rank] | f64 values (row-major)
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, InvalidInputError
from .metrics_io import atomic_write_bytes

ECKP_MAGIC = b"ECKP"
ECKP_VERSION = 1
DTYPE_F64 = 1


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass
class RMSProp:
    lr: float = 1e-4
    decay: float = 0.9
    eps: float = 1e-8
    accumulators: dict = field(default_factory=dict)

    def step(self, params: "OrderedDict[str, Tensor]", grads: dict) -> None:
        """In-place update: acc <- d*acc + (1-d)*g^2; p <- p - lr*g/sqrt(acc + eps)."""
        for name, p in params.items():
            g = grads[name]
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            if g.shape != p.shape:
                raise InvalidInputError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            acc = self.accumulators.get(name)
            if acc is None:
                acc = np.zeros_like(p.data)
            acc = self.decay * acc + (1.0 - self.decay) * g * g
            self.accumulators[name] = acc
            p.data = p.data - self.lr * g / np.sqrt(acc + self.eps)


def rmsprop_step(params, grads, state: RMSProp):
    state.step(params, grads)
    return params


def encode_checkpoint(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [ECKP_MAGIC, struct.pack("<II", ECKP_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<II", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    if bytes(view[:4]) != ECKP_MAGIC:
        raise FormatError(f"bad ECKP magic {bytes(view[:4])!r}")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != ECKP_VERSION:
            raise FormatError(f"unsupported ECKP version {version}")
        pos = 12
        out = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<II", view, pos)
            pos += 8
            if tag != DTYPE_F64:
                raise FormatError(f"unknown dtype tag {tag} for {name}")
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) * 8
            if pos + size > len(data):
                raise FormatError(f"truncated payload for {name}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(dims).copy()
            pos += size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
