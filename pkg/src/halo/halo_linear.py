"""HALO linear layer: quantized forward/backward matmuls with Hadamard placements.

For ``W`` (n x m), input ``X`` (b x m) and output error ``E_Y`` (b x n) the
layer evaluates three products::

    F:  Y   = X    @ W.T
    E:  E_X = E_Y  @ W
    G:  G   = E_Y.T @ X

Each product may carry any subset of three canceling rotation placements on
its operands ``A @ B`` (A is p x k, B is k x q):

    L (left)    H_p (H_p.T A)_Q B_Q
    M (middle)  (A H_k)_Q (H_k.T B)_Q
    R (right)   A_Q (B H_q)_Q H_q.T

so 8 subsets per product and 512 modes per layer.  Operands are quantized in
their natural orientation (X as b x m, W as n x m, E_Y as b x n) and cached by
the rotation they carry, which is how the backward pass reuses the forward
pass's ``(XH)_Q`` and ``(WH)_Q`` without touching X or W again.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from . import hadamard as had
from .quantize import (
    Granularity,
    NumericFormat,
    QuantizedTensor,
    default_granularity,
    qmatmul,
    quantize,
)
from .tensor_core import as_tensor

MATMULS = ("F", "E", "G")
PLACEMENTS = tuple(
    frozenset(c) for r in range(4) for c in itertools.combinations("LMR", r)
)  # the 8 subsets, empty first


def placement_str(p) -> str:
    s = "".join(ch for ch in "LMR" if ch in p)
    return s or "O"


def parse_placement(text: str) -> frozenset:
    t = text.strip().upper()
    if t in ("", "O", "-", "NONE"):
        return frozenset()
    bad = set(t) - set("LMR")
    if bad:
        raise ValueError(f"bad placement {text!r}: letters must be from L, M, R, O")
    return frozenset(t)


@dataclass(frozen=True)
class HaloScheme:
    placement_F: frozenset = frozenset()
    placement_E: frozenset = frozenset()
    placement_G: frozenset = frozenset()
    format_X: NumericFormat = NumericFormat.INT8
    format_W: NumericFormat = NumericFormat.INT8
    format_E: NumericFormat = NumericFormat.INT8
    granularity: Granularity | None = None
    # matmuls executed in low precision; the rest run unquantized
    quantized: frozenset = frozenset(MATMULS)
    peft: bool = False
    # "table" rotates the E error operand as H_b^T (H_b E_Y)_Q ...;
    # "challenge" as H_b (H_b^T E_Y)_Q ...  (identical for power-of-two b)
    left_orientation: str = "table"
    name: str = ""

    def placement(self, matmul: str) -> frozenset:
        return {"F": self.placement_F, "E": self.placement_E, "G": self.placement_G}[matmul]

    def fmt(self, role: str) -> NumericFormat:
        return {"X": self.format_X, "W": self.format_W, "E": self.format_E}[role]

    def gran(self, role: str) -> Granularity:
        return self.granularity or default_granularity(self.fmt(role))

    @property
    def placement_string(self) -> str:
        return ";".join(f"{m}:{placement_str(self.placement(m))}" for m in MATMULS)

    @property
    def label(self) -> str:
        return self.name or self.placement_string

    def with_format(self, fmt) -> "HaloScheme":
        f = NumericFormat.parse(fmt)
        return replace(self, format_X=f, format_W=f, format_E=f)

    @classmethod
    def preset(cls, level: str, fmt="int8", granularity=None) -> "HaloScheme":
        f = NumericFormat.parse(fmt)
        key = level.strip().lower().replace("_", "-")
        g = Granularity.parse(granularity) if granularity is not None else None
        common = dict(format_X=f, format_W=f, format_E=f, granularity=g)
        M, L, R = frozenset("M"), frozenset("L"), frozenset("R")
        if key in ("halo0", "halo-0", "no-halo"):
            return cls(name="halo0", **common)
        if key in ("halo1", "halo-1"):
            return cls(M, R, R, name="halo1", **common)
        if key in ("halo2", "halo-2"):
            return cls(M, L | R, R, name="halo2", **common)
        if key in ("halo-peft", "halopeft", "peft"):
            return cls(M, L | R, frozenset(), peft=True, left_orientation="challenge",
                       name="halo-peft", **common)
        raise ValueError(f"unknown HALO level {level!r}")

    @classmethod
    def parse(cls, text: str, fmt="int8", granularity=None) -> "HaloScheme":
        """Parse ``halo0|halo1|halo2|halo-peft`` or ``F:M;E:LR;G:R`` style strings."""
        if ":" not in text:
            return cls.preset(text, fmt, granularity)
        parts = {}
        for chunk in text.split(";"):
            if not chunk.strip():
                continue
            k, _, v = chunk.partition(":")
            k = k.strip().upper()
            if k not in MATMULS:
                raise ValueError(f"bad placement string {text!r}: unknown matmul {k!r}")
            parts[k] = parse_placement(v)
        f = NumericFormat.parse(fmt)
        g = Granularity.parse(granularity) if granularity is not None else None
        return cls(parts.get("F", frozenset()), parts.get("E", frozenset()),
                   parts.get("G", frozenset()), f, f, f, g)


def all_modes():
    """Every (F, E, G) placement triple: 8**3 = 512 modes."""
    return list(itertools.product(PLACEMENTS, repeat=3))


# --- the placement engine -----------------------------------------------------


def _rot_rows(c: np.ndarray, how: str | None) -> np.ndarray:
    if how is None:
        return c
    d = had.next_supported_dim(c.shape[0])
    c = had.pad_rows(c, d)
    return had.transform_left(c) if how == "HT" else had.inverse_left(c)


def _rot_cols(c: np.ndarray, how: str | None) -> np.ndarray:
    if how is None:
        return c
    d = had.next_supported_dim(c.shape[1])
    c = had.pad_cols(c, d)
    return had.transform_right(c) if how == "H" else had.inverse_right(c)


_FLIP = {None: None, "H": "HT", "HT": "H"}


@dataclass
class Operand:
    """A matmul operand: a tensor in natural orientation, used as-is or transposed.

    ``tensor`` may be None when only a cached quantized copy is expected.
    """

    role: str
    tensor: np.ndarray | None
    transposed: bool
    shape: tuple  # natural shape

    @property
    def used_shape(self):
        r, c = self.shape
        return (c, r) if self.transposed else (r, c)


class OperandCache:
    """Quantized operands keyed by (role, row rotation, column rotation)."""

    def __init__(self, scheme: HaloScheme, counters: Counter):
        self.scheme = scheme
        self.entries: dict[tuple, QuantizedTensor] = {}
        self.counters = counters

    def get(self, role: str, natural: np.ndarray | None, rows: str | None, cols: str | None):
        key = (role, rows, cols)
        q = self.entries.get(key)
        if q is None:
            if natural is None:
                raise RuntimeError(f"operand {key} was not cached and its source was not kept")
            rotated = _rot_cols(_rot_rows(natural, rows), cols)
            q = quantize(rotated, self.scheme.fmt(role), self.scheme.gran(role))
            self.counters[role] += 1
            self.entries[key] = q
        return q


def _placed_product(a: Operand, b: Operand, placement, cache: OperandCache, left_mode: str):
    """Evaluate a quantized ``A @ B`` under a placement subset.

    Rotations are expressed on the operands' natural orientation so equal
    requests hit the same cache entry.  Returns float64.
    """
    a_rows = b_cols = None  # on the used (possibly transposed) operands
    a_cols = b_rows = None
    if "L" in placement:
        a_rows = left_mode
    if "M" in placement:
        a_cols, b_rows = "H", "HT"
    if "R" in placement:
        b_cols = "H"

    def natural_rot(op: Operand, rows, cols):
        # (M C^T) = (C M^T)^T: rotations swap sides and transpose when used transposed
        if op.transposed:
            return _FLIP[cols], _FLIP[rows]
        return rows, cols

    qa = cache.get(a.role, a.tensor, *natural_rot(a, a_rows, a_cols))
    qb = cache.get(b.role, b.tensor, *natural_rot(b, b_rows, b_cols))
    if a.transposed:
        qa = qa.T
    if b.transposed:
        qb = qb.T
    # a middle rotation pads k on both sides identically, so shapes line up
    p = qmatmul(qa, qb)
    if "R" in placement:
        p = had.inverse_right(p)[:, : b.used_shape[1]]
    if "L" in placement:
        p = had.inverse_left(p) if left_mode == "HT" else had.transform_left(p)
        p = p[: a.used_shape[0]]
    return p


def apply_placement(a, b, placement, fmt_a="int8", fmt_b=None, granularity=None,
                    left_mode: str = "HT") -> np.ndarray:
    """Quantized product ``a @ b`` under a placement subset of {L, M, R}.

    Composition order is Left -> Middle -> Right.  Unsupported dimensions are
    zero-padded to the next supported Hadamard size and cropped afterwards.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    if isinstance(placement, str):
        placement = parse_placement(placement)
    fa = NumericFormat.parse(fmt_a)
    fb = fa if fmt_b is None else NumericFormat.parse(fmt_b)
    g = Granularity.parse(granularity) if granularity is not None else None
    scheme = HaloScheme(format_X=fa, format_W=fb, granularity=g)
    cache = OperandCache(scheme, Counter())
    opa = Operand("X", a, False, a.shape)
    opb = Operand("W", b, False, b.shape)
    out = _placed_product(opa, opb, frozenset(placement), cache, left_mode)
    return out.astype(np.result_type(a.dtype, b.dtype))


# --- the layer ----------------------------------------------------------------


@dataclass
class SavedContext:
    """What the forward pass leaves behind for backward."""

    layer_id: int
    batch: int
    cache: OperandCache
    x: np.ndarray | None  # kept only if some backward product needs it unquantized
    xu: np.ndarray | None = None  # X @ U.T for LoRA

    def _find(self, role):
        for (r, rows, cols), q in self.cache.entries.items():
            if r == role:
                return q
        return None

    @property
    def x_q(self) -> QuantizedTensor | None:
        """The quantized (possibly rotated) input saved by forward."""
        return self._find("X")

    @property
    def w_q(self) -> QuantizedTensor | None:
        return self._find("W")

    @property
    def padded_batch(self) -> int:
        return had.next_supported_dim(self.batch)


@dataclass
class Gradients:
    e_x: np.ndarray
    g: np.ndarray | None = None
    g_u: np.ndarray | None = None
    g_v: np.ndarray | None = None


class HaloLinear:
    """A linear layer ``Y = X W^T`` (+ optional LoRA ``(X U^T) V^T``).

    The working precision is the dtype of ``W``.  ``counters`` counts quantizer
    calls per operand role ("X", "W", "E") over the layer's lifetime.
    """

    def __init__(self, W, scheme: HaloScheme | str = "halo0", U=None, V=None):
        self.W = as_tensor(W)
        if isinstance(scheme, str):
            scheme = HaloScheme.parse(scheme)
        self.scheme = scheme
        n, m = self.W.shape
        if (U is None) != (V is None):
            raise ValueError("LoRA needs both U (r x m) and V (n x r)")
        if U is not None:
            U = as_tensor(U, self.W.dtype)
            V = as_tensor(V, self.W.dtype)
            if U.shape[1] != m or V.shape[0] != n or U.shape[0] != V.shape[1]:
                raise ValueError(f"LoRA shapes U{U.shape} V{V.shape} do not fit W{self.W.shape}")
        self.U, self.V = U, V
        self.counters: Counter = Counter()
        self._frozen: OperandCache | None = None

    @property
    def shape(self):
        return self.W.shape

    @property
    def dtype(self):
        return self.W.dtype

    @property
    def rank(self) -> int:
        return 0 if self.U is None else self.U.shape[0]

    def set_weight(self, W) -> None:
        W = as_tensor(W, self.W.dtype)
        if W.shape != self.W.shape:
            raise ValueError("weight shape changed")
        self.W = W
        self._frozen = None

    def reset_counters(self) -> None:
        self.counters.clear()

    # -- helpers

    def _new_cache(self) -> OperandCache:
        cache = OperandCache(self.scheme, self.counters)
        if self.scheme.peft:
            # frozen weights are rotated and quantized once, before fine-tuning
            if self._frozen is None:
                self._frozen = OperandCache(self.scheme, self.counters)
            cache.entries.update(
                {k: v for k, v in self._frozen.entries.items() if k[0] == "W"}
            )
        return cache

    def _remember_frozen(self, cache: OperandCache) -> None:
        if self.scheme.peft and self._frozen is not None:
            for k, v in cache.entries.items():
                if k[0] == "W":
                    self._frozen.entries.setdefault(k, v)

    def _x_needed_later(self, cache: OperandCache) -> bool:
        s = self.scheme
        if self.U is not None:
            return True
        if s.peft:
            return False
        if "G" not in s.quantized:
            return True
        key = ("X", "HT" if "M" in s.placement_G else None, "H" if "R" in s.placement_G else None)
        return key not in cache.entries

    # -- passes

    def forward(self, X, w_quantized: QuantizedTensor | None = None):
        """Return ``(Y, ctx)``.

        ``w_quantized`` lets a caller (the HQ-FSDP simulator) supply the
        gathered quantized weight; it must be the operand the scheme's F
        product would quantize, i.e. ``(W H)_Q`` for a middle placement.
        """
        X = as_tensor(X, self.W.dtype)
        n, m = self.W.shape
        if X.shape[1] != m:
            raise ValueError(f"input has {X.shape[1]} features, layer expects {m}")
        s = self.scheme
        cache = self._new_cache()
        if "F" in s.quantized:
            if w_quantized is not None:
                cols = "H" if "M" in s.placement_F else None
                rows = "HT" if "R" in s.placement_F else None
                cache.entries[("W", rows, cols)] = w_quantized
            y = _placed_product(
                Operand("X", X, False, X.shape),
                Operand("W", self.W, True, self.W.shape),
                s.placement_F, cache, self._left_mode(),
            )
        else:
            y = X.astype(np.float64) @ self.W.T.astype(np.float64)
        self._remember_frozen(cache)
        xu = None
        if self.U is not None:
            xu = X @ self.U.T
            y = y + xu @ self.V.T
        ctx = SavedContext(
            id(self), X.shape[0], cache,
            X if self._x_needed_later(cache) else None, xu,
        )
        return y.astype(self.W.dtype), ctx

    def _left_mode(self) -> str:
        return "H" if self.scheme.left_orientation == "table" else "HT"

    def backward(self, ctx: SavedContext, E_Y, w_quantized: QuantizedTensor | None = None) -> Gradients:
        """Return E_X and the weight (or LoRA) gradients.

        ``w_quantized`` replaces the weight operand of the E product, e.g.
        the HQ-FSDP backward re-gather; it must be bitwise what forward saw.
        """
        if ctx.layer_id != id(self):
            raise ValueError("context belongs to a different layer")
        E_Y = as_tensor(E_Y, self.W.dtype)
        n, m = self.W.shape
        if E_Y.shape != (ctx.batch, n):
            raise ValueError(f"error has shape {E_Y.shape}, expected {(ctx.batch, n)}")
        s = self.scheme
        cache = ctx.cache
        lm = self._left_mode()

        if "E" in s.quantized:
            if w_quantized is not None:
                rows = "HT" if "M" in s.placement_E else None
                cols = "H" if "R" in s.placement_E else None
                cache.entries[("W", rows, cols)] = w_quantized
            e_x = _placed_product(
                Operand("E", E_Y, False, E_Y.shape),
                Operand("W", self.W, False, self.W.shape),
                s.placement_E, cache, lm,
            )
        else:
            e_x = E_Y.astype(np.float64) @ self.W.astype(np.float64)

        g = g_u = g_v = None
        if self.U is not None:
            e_x = e_x + (E_Y @ self.V) @ self.U
            g_v = E_Y.T @ ctx.xu
            g_u = (self.V.T @ E_Y.T) @ ctx.x
        if not s.peft:
            if "G" in s.quantized:
                g = _placed_product(
                    Operand("E", E_Y, True, E_Y.shape),
                    Operand("X", ctx.x, False, (ctx.batch, m)),
                    s.placement_G, cache, lm,
                )
            else:
                if ctx.x is None:
                    raise RuntimeError("unquantized G needs the saved input")
                g = E_Y.T.astype(np.float64) @ ctx.x.astype(np.float64)
            g = g.astype(self.W.dtype)
        dt = self.W.dtype
        return Gradients(
            e_x.astype(dt), g,
            None if g_u is None else g_u.astype(dt),
            None if g_v is None else g_v.astype(dt),
        )


def export_inference_weights(layer: HaloLinear) -> QuantizedTensor:
    """The rotated quantized weight ``(W H)_Q`` used by the forward product."""
    s = layer.scheme
    if "M" not in s.placement_F:
        raise ValueError(f"scheme {s.label} has no forward rotation; export W_Q directly")
    cache = OperandCache(s, Counter())
    if s.peft and layer._frozen is not None and ("W", None, "H") in layer._frozen.entries:
        return layer._frozen.entries[("W", None, "H")]
    return cache.get("W", layer.W, None, "H")
