"""In-process simulation of Hadamard-quantized FSDP (HQ-FSDP).

Logical ranks live in one process and exchange data through synchronous
collectives with a fixed rank order.  Linear weights are sharded by whole
rows (zero "dummy" rows pad the matrix to a multiple of the world size) so a
right-hand Hadamard can be applied shard-locally.  The forward all-gather is:

    (a) rotate own shard  W_i H          (optional)
    (b) local absmax      s_i
    (c) max all-reduce    s = max_i s_i
    (d) quantize shard with the global scale
    (e) all-gather the quantized shards

Backward re-gathers reuse the forward scale and skip (b) and (c).

Byte model (analytic, no sockets)
---------------------------------
element bytes: BF16/IDENTITY 2, INT8/FP8 1, FP6 packed 4 values per 3 bytes;
each scale 4 bytes.  For a collective whose world-visible payload is P bytes,
the ledger charges ``P * (world_size - 1) / world_size`` bytes, the per-rank
receive volume of a ring implementation; world size 1 therefore costs 0.
The max all-reduce of scales has payload ``4 * world_size``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import hadamard as had
from .quantize import PER_TENSOR, NumericFormat, QuantizedTensor, quantize, scales_from_absmax
from .tensor_core import as_tensor

SCALE_BYTES = 4


class StaleScalesError(RuntimeError):
    """The weights changed after the forward pass computed their scales."""


@dataclass(frozen=True)
class WorldConfig:
    world_size: int = 1
    # wrap policy: parameter-name fragments that stay replicated (norm gains)
    replicated: tuple[str, ...] = ("gain",)
    activation_checkpointing: bool = False

    def __post_init__(self):
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")

    def is_sharded(self, name: str) -> bool:
        return not any(frag in name for frag in self.replicated)


def element_bytes(fmt: NumericFormat, count: int) -> int:
    fmt = NumericFormat.parse(fmt)
    if fmt.bits == 6:
        return 3 * math.ceil(count / 4)
    return count * fmt.bits // 8


@dataclass
class ShardedParam:
    name: str
    full_shape: tuple[int, int]
    shards: list[np.ndarray]  # equal-sized row blocks, dummy rows zero
    row_ranges: list[tuple[int, int]]  # in padded row coordinates
    padding: int
    fmt: NumericFormat = NumericFormat.INT8
    apply_hadamard: bool = True
    local_scales: list[float] = field(default_factory=list)
    global_scale: float | None = None

    @property
    def world_size(self) -> int:
        return len(self.shards)

    @property
    def padded_rows(self) -> int:
        return self.full_shape[0] + self.padding

    def full(self) -> np.ndarray:
        """Reassembled weight without dummy rows."""
        return np.vstack(self.shards)[: self.full_shape[0]]

    def padded(self) -> np.ndarray:
        return np.vstack(self.shards)

    def update_rows(self, W) -> None:
        """Write a full (unpadded) weight back into the shards."""
        W = np.asarray(W)
        n = self.full_shape[0]
        for i, (lo, hi) in enumerate(self.row_ranges):
            blk = np.zeros_like(self.shards[i])
            top = min(hi, n)
            if top > lo:
                blk[: top - lo] = W[lo:top]
            self.shards[i] = blk


def shard(W, world: WorldConfig | int, name: str = "weight", fmt="int8",
          apply_hadamard: bool = True) -> ShardedParam:
    """Split ``W`` into ``world_size`` equal, row-aligned, zero-padded blocks."""
    ws = world.world_size if isinstance(world, WorldConfig) else int(world)
    if ws < 1:
        raise ValueError("world_size must be >= 1")
    W = as_tensor(W)
    n, m = W.shape
    per = -(-n // ws)
    padding = per * ws - n
    padded = had.pad_rows(W, per * ws)
    shards = [padded[i * per:(i + 1) * per].copy() for i in range(ws)]
    ranges = [(i * per, (i + 1) * per) for i in range(ws)]
    return ShardedParam(name, (n, m), shards, ranges, padding,
                        NumericFormat.parse(fmt), apply_hadamard)


@dataclass
class LedgerEntry:
    collective: str
    bytes: float
    count: int
    precision: str
    payload_bytes: int
    consumers: int = 1

    def as_dict(self):
        return {
            "collective": self.collective,
            "bytes": self.bytes,
            "count": self.count,
            "precision": self.precision,
            "payload_bytes": self.payload_bytes,
            "consumers": self.consumers,
        }


class CommLedger:
    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def record(self, collective: str, payload_bytes: int, world_size: int, precision: str,
               consumers: int = 1) -> None:
        moved = payload_bytes * (world_size - 1) / world_size
        self.entries.append(LedgerEntry(collective, moved, 1, precision, payload_bytes, consumers))

    def total(self, collective: str | None = None) -> float:
        return sum(e.bytes for e in self.entries if collective is None or e.collective == collective)

    def count(self, collective: str) -> int:
        return sum(e.count for e in self.entries if e.collective == collective)

    def payload(self, collective: str) -> int:
        return sum(e.payload_bytes for e in self.entries if e.collective == collective)

    def summary(self) -> list[dict]:
        out: dict[str, dict] = {}
        for e in self.entries:
            s = out.setdefault(e.collective, {"collective": e.collective, "bytes": 0.0, "count": 0})
            s["bytes"] += e.bytes
            s["count"] += e.count
        return list(out.values())

    def to_json(self, **extra) -> str:
        return json.dumps({"ledger": self.summary(), **extra}, indent=2, sort_keys=True)


def _rotated_shard(param: ShardedParam, i: int) -> np.ndarray:
    s = param.shards[i]
    if param.apply_hadamard:
        # row sharding commutes with right multiplication: (W H)_i = W_i H
        return had.transform_right(s, had.build_spec(param.full_shape[1]))
    return s


def _gather(param: ShardedParam, scale: float, ledger: CommLedger | None, collective: str,
            consumers: int = 1) -> list[QuantizedTensor]:
    ws = param.world_size
    scales = np.full((1, 1), scale)
    parts = [quantize(_rotated_shard(param, i), param.fmt, PER_TENSOR, scales).codes for i in range(ws)]
    codes = np.vstack(parts)  # (e) rank-ordered concatenation
    if ledger is not None:
        payload = element_bytes(param.fmt, codes.size) + (SCALE_BYTES if param.fmt.scaled else 0)
        ledger.record(collective, payload, ws, param.fmt.value, consumers)
    # every rank ends up with the same bytes; hand out independent copies
    return [QuantizedTensor(codes.copy(), scales.copy(), param.fmt, PER_TENSOR) for _ in range(ws)]


def quantized_all_gather(param: ShardedParam, apply_hadamard: bool | None = None,
                         ledger: CommLedger | None = None) -> list[QuantizedTensor]:
    """Forward gather; returns one padded ``(W H)_Q`` per rank and stores the global scale."""
    if apply_hadamard is not None:
        param.apply_hadamard = apply_hadamard
    if param.apply_hadamard and not had.is_supported(param.full_shape[1]):
        raise had.UnsupportedDimension(f"cannot rotate rows of width {param.full_shape[1]}")
    ws = param.world_size
    absmax = [float(np.max(np.abs(_rotated_shard(param, i)))) if param.shards[i].size else 0.0
              for i in range(ws)]
    local = [float(scales_from_absmax(a, param.fmt)) for a in absmax]  # (b)
    param.local_scales = local
    gmax = max(absmax)  # (c) max is order-insensitive
    if ledger is not None and param.fmt.scaled:
        ledger.record("allreduce_scale", SCALE_BYTES * ws, ws, "fp32")
    param.global_scale = float(scales_from_absmax(gmax, param.fmt))
    return _gather(param, param.global_scale, ledger, "allgather")  # (d), (e)


def backward_regather(param: ShardedParam, saved_scale: float | None = None,
                      ledger: CommLedger | None = None, debug: bool = False,
                      consumers: int = 1) -> list[QuantizedTensor]:
    """Backward gather with the forward scale; no scale all-reduce.

    ``consumers=2`` models activation checkpointing: one gather feeds both
    the recomputed forward and the backward product.  With ``debug`` the
    shards' absmax is rechecked and a stale scale raises.
    """
    scale = param.global_scale if saved_scale is None else saved_scale
    if scale is None:
        raise ValueError(f"no saved forward scale for {param.name}")
    if debug:
        gmax = max(float(np.max(np.abs(_rotated_shard(param, i)))) for i in range(param.world_size))
        if float(scales_from_absmax(gmax, param.fmt)) != scale:
            raise StaleScalesError(
                f"{param.name}: weights changed since the forward gather "
                f"(scale {scale!r} vs recomputed {float(scales_from_absmax(gmax, param.fmt))!r})"
            )
    return _gather(param, scale, ledger, "allgather_bwd", consumers)


def reference_gather(W, world_size: int, fmt="int8", apply_hadamard: bool = True) -> QuantizedTensor:
    """Single-process oracle: per-tensor quantization of the rotated padded weight."""
    W = as_tensor(W)
    n, m = W.shape
    per = -(-n // world_size)
    padded = had.pad_rows(W, per * world_size)
    if apply_hadamard:
        padded = had.transform_right(padded, had.build_spec(m))
    return quantize(padded, fmt, PER_TENSOR)


def running_mean(values):
    """Mean in fixed rank order via ``acc += (v - acc) / (i + 1)``.

    Equal inputs return that input bit for bit, and ``(g, -g)`` returns zero.
    """
    acc = np.array(values[0], dtype=np.result_type(values[0], np.float32), copy=True)
    for i, v in enumerate(values[1:], start=1):
        acc = acc + (v - acc) / (i + 1)
    return acc


def reduce_scatter_grads(grads, param_or_world, ledger: CommLedger | None = None,
                         precision: str = "fp32") -> list[np.ndarray]:
    """Average per-rank gradients in rank order, then return each rank's row block.

    Dummy-row gradients are discarded (the last shards come back truncated to
    the real rows, zero-filled to the shard size).
    """
    grads = [np.asarray(g) for g in grads]
    shape = grads[0].shape
    if any(g.shape != shape for g in grads):
        raise ValueError("all ranks must supply gradients of the same shape")
    if isinstance(param_or_world, ShardedParam):
        ranges = param_or_world.row_ranges
        ws = param_or_world.world_size
    else:
        ws = param_or_world.world_size if isinstance(param_or_world, WorldConfig) else int(param_or_world)
        per = -(-shape[0] // ws)
        ranges = [(i * per, (i + 1) * per) for i in range(ws)]
    if len(grads) != ws:
        raise ValueError(f"expected {ws} gradients, got {len(grads)}")
    mean = running_mean(grads)
    if ledger is not None:
        nbytes = mean.size * (2 if precision == "bf16" else mean.dtype.itemsize)
        ledger.record("reducescatter", nbytes, ws, precision)
    out = []
    n = shape[0]
    for lo, hi in ranges:
        blk = np.zeros((hi - lo,) + shape[1:], dtype=mean.dtype)
        top = min(hi, n)
        if top > lo:
            blk[: top - lo] = mean[lo:top]
        out.append(blk)
    return out


def comm_report(ledger: CommLedger) -> dict:
    """Bytes per collective plus the gather compression ratio vs BF16.

    The ratio compares world-visible gather payloads (codes + scales) with a
    BF16 payload of the same element count.
    """
    totals = {s["collective"]: s for s in ledger.summary()}
    gathers = [e for e in ledger.entries if e.collective.startswith("allgather")]
    q = sum(e.payload_bytes for e in gathers)
    bf16 = 0
    for e in gathers:
        fmt = NumericFormat.parse(e.precision)
        code_bytes = e.payload_bytes - (SCALE_BYTES if fmt.scaled else 0)
        if fmt.bits == 6:
            elements = code_bytes // 3 * 4
        else:
            elements = code_bytes * 8 // fmt.bits
        bf16 += 2 * elements
    ratio = q / bf16 if bf16 else 1.0
    return {
        "collectives": totals,
        "total_bytes": ledger.total(),
        "gather_payload_bytes": q,
        "bf16_gather_payload_bytes": bf16,
        "compression_ratio": ratio,
    }


def bf16_gather_payload(shape) -> int:
    return 2 * int(np.prod(shape))


class HQFSDP:
    """Per-model simulator state: sharded weights, a ledger, and saved scales."""

    def __init__(self, world: WorldConfig, fmt="int8", apply_hadamard: bool = True, debug: bool = False):
        self.world = world
        self.fmt = NumericFormat.parse(fmt)
        self.apply_hadamard = apply_hadamard
        self.debug = debug
        self.ledger = CommLedger()
        self.params: dict[str, ShardedParam] = {}

    def register(self, name: str, W) -> ShardedParam:
        p = shard(W, self.world, name, self.fmt, self.apply_hadamard)
        self.params[name] = p
        return p

    def forward_weight(self, name: str, rank: int = 0) -> QuantizedTensor:
        p = self.params[name]
        q = quantized_all_gather(p, ledger=self.ledger)[rank]
        return _crop(q, p.full_shape[0])

    def backward_weight(self, name: str, rank: int = 0) -> QuantizedTensor:
        p = self.params[name]
        consumers = 2 if self.world.activation_checkpointing else 1
        q = backward_regather(p, ledger=self.ledger, debug=self.debug, consumers=consumers)[rank]
        return _crop(q, p.full_shape[0])

    def step_grads(self, name: str, per_rank_grads) -> list[np.ndarray]:
        return reduce_scatter_grads(per_rank_grads, self.params[name], self.ledger)


def _crop(q: QuantizedTensor, rows: int) -> QuantizedTensor:
    """Drop dummy rows; per-tensor scales are unaffected by zero rows."""
    return QuantizedTensor(np.ascontiguousarray(q.codes[:rows]), q.scales, q.fmt, q.granularity)
