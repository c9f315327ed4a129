"""Normalized Hadamard matrices and fast transforms.

A dimension ``d`` is supported when ``d = 2**n * m`` with ``m`` in
{1, 12, 20}.  The power-of-two factor is applied with an in-place style
Walsh-Hadamard butterfly; the base factor with a small dense multiply.  The
1/sqrt(d) normalization is a single scalar multiply at the end.

    H_d = H_{2^n} (x) H_m          (Kronecker product)
    transform_right(A) = A @ H_d
    transform_left(A)  = H_d.T @ A = transform_right(A.T).T
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# Paley type-I constructions (q = 11 and q = 19), rows of +1/-1.
_BASE_12 = (
    "++++++++++++",
    "-++-+++---+-",
    "--++-+++---+",
    "-+-++-+++---",
    "--+-++-+++--",
    "---+-++-+++-",
    "----+-++-+++",
    "-+---+-++-++",
    "-++---+-++-+",
    "-+++---+-++-",
    "--+++---+-++",
    "-+-+++---+-+",
)
_BASE_20 = (
    "++++++++++++++++++++",
    "-++--++++-+-+----++-",
    "--++--++++-+-+----++",
    "-+-++--++++-+-+----+",
    "-++-++--++++-+-+----",
    "--++-++--++++-+-+---",
    "---++-++--++++-+-+--",
    "----++-++--++++-+-+-",
    "-----++-++--++++-+-+",
    "-+----++-++--++++-+-",
    "--+----++-++--++++-+",
    "-+-+----++-++--++++-",
    "--+-+----++-++--++++",
    "-+-+-+----++-++--+++",
    "-++-+-+----++-++--++",
    "-+++-+-+----++-++--+",
    "-++++-+-+----++-++--",
    "--++++-+-+----++-++-",
    "---++++-+-+----++-++",
    "-+--++++-+-+----++-+",
)

SUPPORTED_BASES = (1, 12, 20)


def _parse_base(rows) -> np.ndarray:
    return np.array([[1 if ch == "+" else -1 for ch in r] for r in rows], dtype=np.int64)


@lru_cache(maxsize=None)
def base_matrix(m: int) -> np.ndarray:
    """Unnormalized +-1 base matrix of size m (identity placeholder for m=1)."""
    if m == 1:
        mat = np.ones((1, 1), dtype=np.int64)
    elif m == 12:
        mat = _parse_base(_BASE_12)
    elif m == 20:
        mat = _parse_base(_BASE_20)
    else:
        raise ValueError(f"no hard-coded Hadamard base of size {m}")
    mat.setflags(write=False)
    return mat


class UnsupportedDimension(ValueError):
    pass


@dataclass(frozen=True)
class HadamardSpec:
    dim: int
    pow2_exponent: int
    base_dim: int
    base: np.ndarray = field(repr=False, compare=False)

    @property
    def pow2(self) -> int:
        return 1 << self.pow2_exponent

    @property
    def norm(self) -> float:
        return 1.0 / math.sqrt(self.dim)


def _factor(d: int):
    for m in (1, 12, 20):
        if d % m == 0:
            q = d // m
            if q > 0 and q & (q - 1) == 0:
                return q.bit_length() - 1, m
    return None


def is_supported(d: int) -> bool:
    return d >= 1 and _factor(d) is not None


@lru_cache(maxsize=None)
def build_spec(d: int) -> HadamardSpec:
    if d < 1 or _factor(d) is None:
        raise UnsupportedDimension(f"dimension {d} is not 2^n, 2^n*12 or 2^n*20")
    n, m = _factor(d)
    return HadamardSpec(d, n, m, base_matrix(m))


def next_supported_dim(d: int) -> int:
    """Smallest supported dimension >= d."""
    if d < 1:
        raise ValueError("dimension must be positive")
    k = d
    while not is_supported(k):
        k += 1
    return k


def _fwht_rows(x: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard butterfly along axis 1 of a 3-D array.

    ``x`` has shape (rows, p, m) with p a power of two; the butterfly mixes
    the p axis and leaves the m axis alone.
    """
    rows, p, m = x.shape
    h = 1
    while h < p:
        x = x.reshape(rows, p // (2 * h), 2, h, m)
        a = x[:, :, 0]
        b = x[:, :, 1]
        x = np.stack((a + b, a - b), axis=2)
        h *= 2
    return x.reshape(rows, p, m)


def _check_spec(spec_or_dim) -> HadamardSpec:
    if isinstance(spec_or_dim, HadamardSpec):
        return spec_or_dim
    return build_spec(int(spec_or_dim))


def _right(a, spec, transpose: bool) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {a.shape}")
    spec = _check_spec(a.shape[1] if spec is None else spec)
    if a.shape[1] != spec.dim:
        raise ValueError(f"right transform: tensor has {a.shape[1]} columns, spec dim is {spec.dim}")
    dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    rows = a.shape[0]
    x = a.astype(dtype, copy=False).reshape(rows, spec.pow2, spec.base_dim)
    if spec.base_dim > 1:
        base = (spec.base.T if transpose else spec.base).astype(dtype)
        # fixed-order elementwise accumulation (no BLAS) keeps every row's
        # result independent of how many rows are transformed together
        acc = x[..., 0:1] * base[0]
        for k in range(1, spec.base_dim):
            acc = acc + x[..., k : k + 1] * base[k]
        x = acc
    x = _fwht_rows(x)
    return x.reshape(rows, spec.dim) * dtype.type(spec.norm)


def transform_right(a, spec=None) -> np.ndarray:
    """Return ``a @ H_d`` for a 2-D array whose column count is ``spec.dim``."""
    return _right(a, spec, transpose=False)


def transform_left(a, spec=None) -> np.ndarray:
    """Return ``H_d.T @ a`` for a 2-D array whose row count is ``spec.dim``."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {a.shape}")
    spec = _check_spec(a.shape[0] if spec is None else spec)
    if a.shape[0] != spec.dim:
        raise ValueError(f"transform_left: tensor has {a.shape[0]} rows, spec dim is {spec.dim}")
    return np.ascontiguousarray(transform_right(a.T, spec).T)


def inverse_right(a, spec=None) -> np.ndarray:
    """Return ``a @ H_d.T`` (undoes :func:`transform_right`).

    H_d.T = H_{2^n} (x) H_m.T because the Sylvester factor is symmetric.
    """
    return _right(a, spec, transpose=True)


def inverse_left(a, spec=None) -> np.ndarray:
    """Return ``H_d @ a`` (undoes :func:`transform_left`)."""
    return np.ascontiguousarray(inverse_right(np.asarray(a).T, spec).T)


def _sylvester(p: int) -> np.ndarray:
    if p == 1:
        return np.ones((1, 1), dtype=np.int64)
    h2 = np.array([[1, 1], [1, -1]], dtype=np.int64)
    return np.kron(h2, _sylvester(p // 2))


def dense_matrix(spec, dtype=np.float64) -> np.ndarray:
    """Explicit normalized ``H_d``; meant as an oracle for small d (<= 4096)."""
    spec = _check_spec(spec)
    h = np.kron(_sylvester(spec.pow2), spec.base)
    return (h / math.sqrt(spec.dim)).astype(dtype)


# --- zero-padded helpers used when a dimension is not supported -------------


def pad_rows(a: np.ndarray, rows: int) -> np.ndarray:
    if a.shape[0] == rows:
        return a
    out = np.zeros((rows, a.shape[1]), dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


def pad_cols(a: np.ndarray, cols: int) -> np.ndarray:
    if a.shape[1] == cols:
        return a
    out = np.zeros((a.shape[0], cols), dtype=a.dtype)
    out[:, : a.shape[1]] = a
    return out
