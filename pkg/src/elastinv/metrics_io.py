"""Evaluation metrics and on-disk formats.

EGRID layout (all little-endian)::

    b"EGRD" | u32 version=1 | u32 rows | u32 cols | u32 channels | f32 payload

The payload is row-major with the channel index varying fastest.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, InvalidInputError

EGRID_MAGIC = b"EGRD"
EGRID_VERSION = 1
_EGRID_HEADER = struct.Struct("<4sIIII")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_egrid(grid) -> bytes:
    arr = np.asarray(grid)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidInputError(f"EGRID expects a (rows, cols[, channels]) array, got shape {arr.shape}")
    rows, cols, channels = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _EGRID_HEADER.pack(EGRID_MAGIC, EGRID_VERSION, rows, cols, channels) + payload


def decode_egrid(data: bytes) -> np.ndarray:
    if len(data) < _EGRID_HEADER.size:
        raise FormatError("file too short for an EGRID header")
    magic, version, rows, cols, channels = _EGRID_HEADER.unpack_from(data)
    if magic != EGRID_MAGIC:
        raise FormatError(f"bad EGRID magic {magic!r}")
    if version != EGRID_VERSION:
        raise FormatError(f"unsupported EGRID version {version}")
    expected = rows * cols * channels * 4
    if len(data) - _EGRID_HEADER.size != expected:
        raise FormatError(f"EGRID payload is {len(data) - _EGRID_HEADER.size} bytes, header implies {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=_EGRID_HEADER.size)
    return arr.reshape(rows, cols, channels).copy()


def write_egrid(path, grid) -> None:
    atomic_write_bytes(path, encode_egrid(grid))


def read_egrid(path) -> np.ndarray:
    """Return a float32 array of shape (rows, cols, channels)."""
    return decode_egrid(Path(path).read_bytes())


def dofs_to_grid(v, rows: int, cols: int) -> np.ndarray:
    """Interleaved (lateral, axial) DOF vector -> (rows, cols, 2) grid."""
    return np.asarray(v).reshape(rows, cols, 2)


@dataclass
class MetricsReport:
    rel_l2: float
    mse: float
    psnr: float
    contrast_ratio: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d


def evaluate(x_hat, x_true, mask=None) -> MetricsReport:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_hat.size != x_true.size:
        raise InvalidInputError(f"shape mismatch: {x_hat.shape} vs {x_true.shape}")
    x_hat = x_hat.reshape(x_true.shape)
    diff = x_hat - x_true
    mse = float(np.mean(diff ** 2))
    rel = float(np.linalg.norm(diff) / np.linalg.norm(x_true))
    psnr = math.inf if mse == 0 else float(10.0 * np.log10(np.max(x_true) ** 2 / mse))
    contrast = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(x_true.shape)
        if mask.all() or not mask.any():
            raise DomainError("contrast ratio needs both lesion and background nodes")
        contrast = float(x_hat[mask].mean() / x_hat[~mask].mean())
    return MetricsReport(rel_l2=rel, mse=mse, psnr=psnr, contrast_ratio=contrast)


def aggregate(reports: list[MetricsReport]) -> dict:
    out = {}
    for key in ("rel_l2", "mse", "psnr", "contrast_ratio"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if not vals:
            continue
        mean = float(np.mean(vals))
        out[key] = "inf" if math.isinf(mean) else mean
    return out


def cross_section(x, row_index: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, :, 0]
    if not 0 <= row_index < x.shape[0]:
        raise InvalidInputError(f"row {row_index} outside 0..{x.shape[0] - 1}")
    return x[row_index].astype(np.float64)


def cross_section_csv(x, row_index: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["col", "value"])
    for c, v in enumerate(cross_section(x, row_index)):
        writer.writerow([c, repr(float(v))])
    return buf.getvalue()


def png_levels(x, vmin=None, vmax=None) -> tuple[np.ndarray, float, float]:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot export non-finite values")
    vmin = float(x.min()) if vmin is None else float(vmin)
    vmax = float(x.max()) if vmax is None else float(vmax)
    if vmax <= vmin:
        return np.zeros(x.shape, dtype=np.uint16), vmin, vmax
    scaled = np.clip((x - vmin) / (vmax - vmin), 0.0, 1.0) * 65535.0
    return np.rint(scaled).astype(np.uint16), vmin, vmax


def export_png(x, path, vmin=None, vmax=None) -> None:
    """16-bit grayscale PNG plus a ``.json`` sidecar holding the value range."""
    from PIL import Image

    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, :, 0]
    levels, vmin, vmax = png_levels(x, vmin, vmax)
    buf = io.BytesIO()
    Image.fromarray(levels).save(buf, format="PNG")
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue())
    sidecar = {"vmin": vmin, "vmax": vmax, "max_level": 65535, "mapping": "linear"}
    atomic_write_text(path.with_suffix(".json"), json.dumps(sidecar, indent=2))


def read_png_levels(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(np.uint16)
