"""Dense 2-D matrix plumbing shared by every other module.

Tensors are plain ``numpy.ndarray`` objects; :func:`as_tensor` is the single
gate that enforces the 2-D, finite, real-valued contract.  Storage defaults to
float32, and ``float64`` is the oracle ("double accumulation") precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

MAGIC = b"HALT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIBBQQ")

OUTLIER_MULTIPLIER = 10.0

Axis = Literal["rows", "columns"]


class TensorFormatError(ValueError):
    """Raised when a tensor file cannot be decoded."""


def as_tensor(a, dtype=None) -> np.ndarray:
    """Validate and return ``a`` as a 2-D finite array.

    ``dtype=None`` keeps float32/float64 inputs as they are and promotes
    anything else to float32.
    """
    arr = np.asarray(a)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def matmul(a, b, accumulate: Literal["single", "double"] = "single") -> np.ndarray:
    """Matrix product; ``accumulate="double"`` computes and returns float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if accumulate == "double":
        return a.astype(np.float64) @ b.astype(np.float64)
    if accumulate != "single":
        raise ValueError(f"unknown accumulate mode {accumulate!r}")
    return a @ b


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class OutlierStats:
    max_abs: np.ndarray  # one entry per slice
    outlier_count: int
    threshold: float

    def to_csv(self) -> str:
        lines = ["slice_index,max_abs,outlier_count"]
        # the outlier count is global; it is repeated on every row so the
        # table stays rectangular
        for i, m in enumerate(self.max_abs):
            lines.append(f"{i},{float(m)!r},{self.outlier_count}")
        return "\n".join(lines) + "\n"


def outlier_stats(a, axis: Axis = "columns", multiplier: float = OUTLIER_MULTIPLIER) -> OutlierStats:
    """Per-row or per-column max magnitude plus a count of outlier entries.

    An entry is an outlier when ``|x| >= multiplier * mean(|A|)``.  A zero
    tensor has no outliers.
    """
    a = np.abs(np.asarray(a, dtype=np.float64))
    if a.size == 0:
        raise ValueError("outlier_stats needs a non-empty tensor")
    if axis == "columns":
        per_slice = a.max(axis=0)
    elif axis == "rows":
        per_slice = a.max(axis=1)
    else:
        raise ValueError(f"axis must be 'rows' or 'columns', got {axis!r}")
    threshold = multiplier * a.mean()
    count = int(np.count_nonzero(a >= threshold)) if threshold > 0 else 0
    return OutlierStats(per_slice, count, float(threshold))


@dataclass(frozen=True)
class OutlierProfile:
    """Which rows or columns to magnify, and by how much."""

    channel_indices: tuple[int, ...]
    magnification: float
    axis: Axis = "columns"

    def __post_init__(self):
        object.__setattr__(self, "channel_indices", tuple(int(i) for i in self.channel_indices))
        if self.magnification < 1:
            raise ValueError("magnification must be >= 1")
        if self.axis not in ("rows", "columns"):
            raise ValueError(f"axis must be 'rows' or 'columns', got {self.axis!r}")

    @classmethod
    def random(cls, size: int, count: int, magnification: float, axis: Axis = "columns", seed=0):
        rng = np.random.default_rng(seed)
        idx = rng.choice(size, size=count, replace=False)
        return cls(tuple(sorted(int(i) for i in idx)), magnification, axis)


def inject_outliers(a, profile: OutlierProfile, seed=None) -> np.ndarray:
    """Scale the profile's rows/columns of ``a`` by its magnification.

    With a non-None ``seed`` each selected slice also gets a random sign
    flip drawn from that seed, so distinct seeds give distinct but
    reproducible outlier layouts.
    """
    out = as_tensor(a).copy()
    limit = out.shape[1] if profile.axis == "columns" else out.shape[0]
    for i in profile.channel_indices:
        if not 0 <= i < limit:
            raise IndexError(f"outlier index {i} out of range for {profile.axis} of size {limit}")
    factors = np.full(len(profile.channel_indices), profile.magnification, dtype=np.float64)
    if seed is not None and profile.magnification != 1:
        signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=len(factors))
        factors = factors * signs
    idx = list(profile.channel_indices)
    if profile.axis == "columns":
        out[:, idx] = out[:, idx] * factors.astype(out.dtype)
    else:
        out[idx, :] = out[idx, :] * factors.astype(out.dtype)[:, None]
    return out


def random_tensor(rows: int, cols: int, seed, dtype=np.float32, profile: OutlierProfile | None = None):
    """Standard-normal tensor, optionally with injected outliers."""
    a = np.random.default_rng(seed).standard_normal((rows, cols)).astype(dtype)
    if profile is not None:
        a = inject_outliers(a, profile)
    return a


# --- binary file format -----------------------------------------------------


def encode_tensor(a) -> bytes:
    a = as_tensor(a)
    code = 0 if a.dtype == np.float32 else 1
    header = _HEADER.pack(MAGIC, VERSION, code, 2, a.shape[0], a.shape[1])
    return header + a.astype(DTYPE_CODES[code], copy=False).tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    if len(buf) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, code, rank, rows, cols = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise TensorFormatError(f"version mismatch: file has {version}, expected {VERSION}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if rank != 2:
        raise TensorFormatError(f"unsupported rank {rank}")
    dtype = DTYPE_CODES[code]
    need = rows * cols * dtype.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) < need:
        raise TensorFormatError(f"truncated payload: need {need} bytes, have {len(payload)}")
    if len(payload) > need:
        raise TensorFormatError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, a) -> None:
    Path(path).write_bytes(encode_tensor(a))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def identity(d: int, dtype=np.float32) -> np.ndarray:
    return np.eye(d, dtype=dtype)


def frobenius(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def relative_error(actual, expected) -> float:
    """``||actual - expected||_F / ||expected||_F`` (absolute when expected is 0)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = np.linalg.norm(expected)
    diff = np.linalg.norm(actual - expected)
    return float(diff / denom) if denom > 0 else float(diff)


__all__: Sequence[str] = [
    "Axis",
    "MAGIC",
    "OutlierProfile",
    "OutlierStats",
    "TensorFormatError",
    "as_tensor",
    "cosine_similarity",
    "decode_tensor",
    "encode_tensor",
    "frobenius",
    "identity",
    "inject_outliers",
    "matmul",
    "outlier_stats",
    "random_tensor",
    "read_tensor",
    "relative_error",
    "write_tensor",
]
