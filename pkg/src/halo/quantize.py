"""Software-emulated low-precision formats and symmetric RTN quantization.

Every quantizer here is symmetric (no zero point) and rounds half to even.
Scales are one positive float64 per group; an all-zero group gets scale 1.0.

Formats
-------
INT8        integer grid [-127, 127]
FP8_E4M3    OCP E4M3, bias 7, max 448, subnormals, saturating
FP6_E3M2    E3M2, bias 3, max 28, subnormals, saturating
MXFP6_E3M2  E3M2 elements sharing a power-of-two scale per 32-element block
BF16EMU     float rounded to an 8-bit significand, unscaled
IDENTITY    no-op, unscaled
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor_core import TensorFormatError, as_tensor


class NumericFormat(enum.Enum):
    INT8 = "int8"
    FP8_E4M3 = "fp8_e4m3"
    FP6_E3M2 = "fp6_e3m2"
    MXFP6_E3M2 = "mxfp6_e3m2"
    BF16EMU = "bf16emu"
    IDENTITY = "identity"

    @property
    def max_value(self) -> float:
        return _MAX[self]

    @property
    def bits(self) -> int:
        """Wire width of one element, used by the communication byte model."""
        return _BITS[self]

    @property
    def is_float(self) -> bool:
        return self in (NumericFormat.FP8_E4M3, NumericFormat.FP6_E3M2, NumericFormat.MXFP6_E3M2)

    @property
    def scaled(self) -> bool:
        return self not in (NumericFormat.BF16EMU, NumericFormat.IDENTITY)

    @classmethod
    def parse(cls, name) -> "NumericFormat":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"fp8": "fp8_e4m3", "e4m3": "fp8_e4m3", "fp6": "fp6_e3m2", "e3m2": "fp6_e3m2",
                   "mxfp6": "mxfp6_e3m2", "bf16": "bf16emu", "none": "identity", "fp32": "identity"}
        key = aliases.get(key, key)
        for f in cls:
            if f.value == key:
                return f
        raise ValueError(f"unknown numeric format {name!r}")


_BF16_MAX = float(np.frombuffer(np.array([0x7F7F0000], dtype=np.uint32).tobytes(), dtype=np.float32)[0])

_MAX = {
    NumericFormat.INT8: 127.0,
    NumericFormat.FP8_E4M3: 448.0,
    NumericFormat.FP6_E3M2: 28.0,
    NumericFormat.MXFP6_E3M2: 28.0,
    NumericFormat.BF16EMU: _BF16_MAX,
    NumericFormat.IDENTITY: math.inf,
}
_BITS = {
    NumericFormat.INT8: 8,
    NumericFormat.FP8_E4M3: 8,
    NumericFormat.FP6_E3M2: 6,
    NumericFormat.MXFP6_E3M2: 6,
    NumericFormat.BF16EMU: 16,
    NumericFormat.IDENTITY: 16,
}
# (mantissa bits, exponent of the smallest normal)
_FP_LAYOUT = {
    NumericFormat.FP8_E4M3: (3, -6),
    NumericFormat.FP6_E3M2: (2, -2),
    NumericFormat.MXFP6_E3M2: (2, -2),
}


@dataclass(frozen=True)
class Granularity:
    kind: str  # "tensor" | "row" | "column" | "block" | "mx"
    block: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in ("tensor", "row", "column", "block", "mx"):
            raise ValueError(f"unknown granularity {self.kind!r}")
        if self.kind in ("block", "mx") and min(self.block) < 1:
            raise ValueError("block dimensions must be positive")

    @classmethod
    def parse(cls, text) -> "Granularity":
        if isinstance(text, cls):
            return text
        t = str(text).strip().lower()
        if t in ("tensor", "per_tensor", "pertensor"):
            return PER_TENSOR
        if t in ("row", "per_row", "perrow"):
            return PER_ROW
        if t in ("column", "col", "per_column", "percolumn"):
            return PER_COLUMN
        if t in ("mx", "mxblock", "mx32"):
            return MX_BLOCK
        if t.startswith("block"):
            r, _, c = t[len("block"):].strip(":()").partition("x")
            return cls("block", (int(r), int(c or r)))
        raise ValueError(f"unknown granularity {text!r}")

    def __str__(self):
        if self.kind in ("block", "mx"):
            return f"{self.kind}{self.block[0]}x{self.block[1]}"
        return self.kind

    def group_shape(self, shape) -> tuple[int, int]:
        rows, cols = shape
        if self.kind == "tensor":
            return 1, 1
        if self.kind == "row":
            return rows, 1
        if self.kind == "column":
            return 1, cols
        br, bc = self.block
        return -(-rows // br), -(-cols // bc)

    def transpose(self) -> "Granularity":
        if self.kind == "row":
            return PER_COLUMN
        if self.kind == "column":
            return PER_ROW
        if self.kind in ("block", "mx"):
            return Granularity(self.kind, self.block[::-1])
        return self


PER_TENSOR = Granularity("tensor")
PER_ROW = Granularity("row")
PER_COLUMN = Granularity("column")
MX_BLOCK = Granularity("mx", (1, 32))


def block(rows: int, cols: int) -> Granularity:
    return Granularity("block", (rows, cols))


def default_granularity(fmt: NumericFormat) -> Granularity:
    return MX_BLOCK if fmt is NumericFormat.MXFP6_E3M2 else PER_TENSOR


# --- scalar rounding ----------------------------------------------------------


def fp_round(x, fmt: NumericFormat) -> np.ndarray:
    """Round to the nearest value of a small float format (ties to even), saturating."""
    mbits, emin = _FP_LAYOUT[fmt]
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    _, e = np.frexp(ax)
    # frexp gives ax = f * 2**e with f in [0.5, 1), so floor(log2 ax) = e - 1
    exp = np.maximum(e - 1, emin)
    quantum = np.ldexp(1.0, exp - mbits)
    r = np.round(ax / quantum) * quantum
    r = np.minimum(r, fmt.max_value)
    return np.copysign(r, x)


def bf16_round(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -_BF16_MAX, _BF16_MAX)
    u = x.astype(np.float32).view(np.uint32).astype(np.uint64)
    u = (u + 0x7FFF + ((u >> 16) & 1)) & 0xFFFF0000
    out = u.astype(np.uint32).view(np.float32).astype(np.float64)
    # rounding can only overflow past the clip bound into inf; saturate
    return np.clip(out, -_BF16_MAX, _BF16_MAX)


@lru_cache(maxsize=None)
def representable_values(fmt: NumericFormat) -> np.ndarray:
    """Every non-negative finite value of an FP element format, ascending.

    Index k equals the unsigned bit pattern, so an even index means an even
    mantissa LSB.  Built from the bit layout, independently of
    :func:`fp_round`.
    """
    mbits, emin = _FP_LAYOUT[fmt]
    ebits = 4 if fmt is NumericFormat.FP8_E4M3 else 3
    bias = 1 - emin
    vals = []
    for code in range(1 << (ebits + mbits)):
        e = code >> mbits
        m = code & ((1 << mbits) - 1)
        if e == 0:
            v = (m / (1 << mbits)) * 2.0 ** (1 - bias)
        else:
            v = (1 + m / (1 << mbits)) * 2.0 ** (e - bias)
        if fmt is NumericFormat.FP8_E4M3 and e == 15 and m == 7:
            continue  # the NaN pattern
        vals.append(v)
    return np.array(vals)


def round_scalar(x, fmt: NumericFormat) -> np.ndarray:
    """Elementwise rounding to the format grid with scale 1."""
    fmt = NumericFormat.parse(fmt)
    if fmt is NumericFormat.INT8:
        return np.clip(np.round(np.asarray(x, dtype=np.float64)), -127, 127)
    if fmt.is_float:
        return fp_round(x, fmt)
    if fmt is NumericFormat.BF16EMU:
        return bf16_round(x)
    return np.asarray(x, dtype=np.float64)


# --- scales -------------------------------------------------------------------


def _padded(a: np.ndarray, gran: Granularity) -> np.ndarray:
    if gran.kind not in ("block", "mx"):
        return a
    gr, gc = gran.group_shape(a.shape)
    br, bc = gran.block
    out = np.zeros((gr * br, gc * bc), dtype=a.dtype)
    out[: a.shape[0], : a.shape[1]] = a
    return out


def group_absmax(a: np.ndarray, gran: Granularity) -> np.ndarray:
    ab = np.abs(np.asarray(a, dtype=np.float64))
    if gran.kind == "tensor":
        return np.full((1, 1), ab.max() if ab.size else 0.0)
    if gran.kind == "row":
        return ab.max(axis=1, keepdims=True)
    if gran.kind == "column":
        return ab.max(axis=0, keepdims=True)
    gr, gc = gran.group_shape(ab.shape)
    br, bc = gran.block
    return _padded(ab, gran).reshape(gr, br, gc, bc).max(axis=(1, 3))


def expand_scales(scales: np.ndarray, gran: Granularity, shape) -> np.ndarray:
    """Broadcast a group scale table to a full tensor of ``shape``."""
    if gran.kind in ("tensor", "row", "column"):
        return np.broadcast_to(scales, shape)
    br, bc = gran.block
    full = np.repeat(np.repeat(scales, br, axis=0), bc, axis=1)
    return full[: shape[0], : shape[1]]


def _pow2_ceil(ratio: np.ndarray) -> np.ndarray:
    m, e = np.frexp(ratio)
    exp = np.where(m == 0.5, e - 1, e)
    return np.ldexp(1.0, exp)


def scales_from_absmax(absmax, fmt: NumericFormat) -> np.ndarray:
    """absmax / format max per group, 1.0 for empty groups, powers of two for MX."""
    fmt = NumericFormat.parse(fmt)
    absmax = np.asarray(absmax, dtype=np.float64)
    if not fmt.scaled:
        return np.ones_like(absmax)
    if fmt is NumericFormat.MXFP6_E3M2:
        s = _pow2_ceil(np.where(absmax > 0, absmax / fmt.max_value, 1.0))
        # division may have rounded down across a power of two
        s = np.where(absmax / s > fmt.max_value, 2 * s, s)
    else:
        s = absmax / fmt.max_value
    return np.where(absmax > 0, s, 1.0)


def compute_scale(a, fmt, granularity=None) -> np.ndarray:
    fmt = NumericFormat.parse(fmt)
    gran = default_granularity(fmt) if granularity is None else Granularity.parse(granularity)
    a = as_tensor(a)
    return scales_from_absmax(group_absmax(a, gran), fmt)


# --- quantized tensors --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray  # int8 grid values for INT8, rounded reals otherwise
    scales: np.ndarray  # one float64 per group, shape == granularity.group_shape(shape)
    fmt: NumericFormat
    granularity: Granularity

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def T(self) -> "QuantizedTensor":
        return QuantizedTensor(
            np.ascontiguousarray(self.codes.T),
            np.ascontiguousarray(self.scales.T),
            self.fmt,
            self.granularity.transpose(),
        )

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    def equals(self, other: "QuantizedTensor") -> bool:
        """Bitwise equality of codes and scales plus matching metadata."""
        return (
            self.fmt is other.fmt
            and self.granularity == other.granularity
            and self.codes.dtype == other.codes.dtype
            and self.codes.shape == other.codes.shape
            and self.codes.tobytes() == other.codes.tobytes()
            and self.scales.tobytes() == other.scales.tobytes()
        )


def quantize(a, fmt, granularity=None, scales=None) -> QuantizedTensor:
    """Symmetric round-to-nearest onto the format grid.

    Externally supplied ``scales`` are used verbatim (the HQ-FSDP path); they
    must be positive and shaped like the granularity's group table.
    """
    fmt = NumericFormat.parse(fmt)
    gran = default_granularity(fmt) if granularity is None else Granularity.parse(granularity)
    a = as_tensor(a)
    if scales is None:
        scales = scales_from_absmax(group_absmax(a, gran), fmt)
    else:
        scales = np.array(scales, dtype=np.float64).reshape(gran.group_shape(a.shape))
        if not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise ValueError("supplied scales must be positive and finite")
    if fmt is NumericFormat.IDENTITY:
        return QuantizedTensor(a.copy(), scales, fmt, gran)
    x = a.astype(np.float64) / expand_scales(scales, gran, a.shape)
    codes = round_scalar(x, fmt)
    if fmt is NumericFormat.INT8:
        codes = codes.astype(np.int8)
    return QuantizedTensor(codes, scales, fmt, gran)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.fmt is NumericFormat.IDENTITY:
        return q.codes.copy()
    return q.codes.astype(np.float64) * expand_scales(q.scales, q.granularity, q.shape)


def qmatmul(qa: QuantizedTensor, qb: QuantizedTensor, transpose_b: bool = False) -> np.ndarray:
    """Product of two quantized operands, ``qa @ qb`` (or ``qa @ qb.T``).

    INT8 x INT8 with tensor-wise scales accumulates integer codes exactly and
    applies both scales once at the end.  Tensor-wise float formats multiply
    the rounded codes and rescale.  Anything else dequantizes first.
    """
    if transpose_b:
        qb = qb.T
    if qa.shape[1] != qb.shape[0]:
        raise ValueError(f"qmatmul shape mismatch: {qa.shape} @ {qb.shape}")
    both_tensor = qa.granularity.kind == "tensor" and qb.granularity.kind == "tensor"
    sa = float(qa.scales.reshape(-1)[0])
    sb = float(qb.scales.reshape(-1)[0])
    if both_tensor and qa.fmt is NumericFormat.INT8 and qb.fmt is NumericFormat.INT8:
        acc = qa.codes.astype(np.int64) @ qb.codes.astype(np.int64)
        return (acc * sa) * sb
    if both_tensor and qa.fmt.is_float and qb.fmt.is_float:
        return (qa.codes.astype(np.float64) @ qb.codes.astype(np.float64) * sa) * sb
    out_dtype = np.result_type(qa.codes.dtype, qb.codes.dtype, np.float32)
    if qa.fmt is NumericFormat.IDENTITY and qb.fmt is NumericFormat.IDENTITY:
        return qa.codes.astype(out_dtype) @ qb.codes.astype(out_dtype)
    return dequantize(qa) @ dequantize(qb)


@dataclass(frozen=True)
class ErrorReport:
    mse: float
    max_abs_err: float
    snr: float  # dB; inf when the reconstruction is exact

    def as_dict(self):
        return {"mse": self.mse, "max_abs_err": self.max_abs_err, "snr_db": self.snr}


def quantization_error_report(a, fmt, granularity=None) -> ErrorReport:
    a = as_tensor(a)
    err = dequantize(quantize(a, fmt, granularity)) - a.astype(np.float64)
    mse = float(np.mean(err**2)) if err.size else 0.0
    signal = float(np.mean(a.astype(np.float64) ** 2)) if a.size else 0.0
    if mse == 0.0:
        snr = math.inf
    elif signal == 0.0:
        snr = -math.inf
    else:
        snr = 10.0 * math.log10(signal / mse)
    return ErrorReport(mse, float(np.max(np.abs(err))) if err.size else 0.0, snr)


# --- quantized tensor files ---------------------------------------------------
#
# Little-endian layout:
#   magic "HALQ" (4) | version u32 = 1 | format code u8 | granularity code u8 |
#   code dtype u8 (0 = int8, 1 = f64) | reserved u8 = 0 | block rows u32 |
#   block cols u32 | rows u64 | cols u64 | codes (row-major) |
#   scale table (f64, row-major, shape = granularity.group_shape((rows, cols)))

QMAGIC = b"HALQ"
QVERSION = 1
_QHEADER = struct.Struct("<4sIBBBBIIQQ")
_FORMAT_CODES = {f: i for i, f in enumerate(NumericFormat)}
_GRAN_CODES = {"tensor": 0, "row": 1, "column": 2, "block": 3, "mx": 4}


def encode_quantized(q: QuantizedTensor) -> bytes:
    rows, cols = q.shape
    int8 = q.codes.dtype == np.int8
    header = _QHEADER.pack(
        QMAGIC, QVERSION, _FORMAT_CODES[q.fmt], _GRAN_CODES[q.granularity.kind],
        0 if int8 else 1, 0, q.granularity.block[0], q.granularity.block[1], rows, cols,
    )
    codes = q.codes.astype("<i1" if int8 else "<f8")
    return header + codes.tobytes() + q.scales.astype("<f8").tobytes()


def decode_quantized(buf: bytes) -> QuantizedTensor:
    if len(buf) < _QHEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, fcode, gcode, ccode, _, br, bc, rows, cols = _QHEADER.unpack_from(buf)
    if magic != QMAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != QVERSION:
        raise TensorFormatError(f"version mismatch: file {version}, reader {QVERSION}")
    try:
        fmt = list(NumericFormat)[fcode]
        kind = {v: k for k, v in _GRAN_CODES.items()}[gcode]
        cdtype = {0: np.dtype("<i1"), 1: np.dtype("<f8")}[ccode]
    except (IndexError, KeyError):
        raise TensorFormatError("unknown format, granularity or code dtype") from None
    gran = Granularity(kind, (br, bc)) if kind in ("block", "mx") else Granularity(kind)
    groups = gran.group_shape((rows, cols))
    ncodes = rows * cols * cdtype.itemsize
    nscales = groups[0] * groups[1] * 8
    body = len(buf) - _QHEADER.size
    if body < ncodes + nscales:
        raise TensorFormatError("truncated payload")
    if body > ncodes + nscales:
        raise TensorFormatError("trailing bytes")
    off = _QHEADER.size
    codes = np.frombuffer(buf, cdtype, rows * cols, off).reshape(rows, cols)
    scales = np.frombuffer(buf, "<f8", groups[0] * groups[1], off + ncodes).reshape(groups)
    return QuantizedTensor(codes.astype(np.int8 if ccode == 0 else np.float64),
                           scales.astype(np.float64), fmt, gran)
