"""Gradient-quality probes: finite differences, sensitivity tables, placement grids."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from ..halo_linear import MATMULS, PLACEMENTS, HaloScheme, all_modes, placement_str
from ..quantize import NumericFormat
from ..tensor_core import cosine_similarity
from .model import LOSSES, ToyModel

# --- finite differences --------------------------------------------------------


def numerical_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (x is perturbed in place, then restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def grad_rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-30)
    return float(np.linalg.norm(analytic - numeric) / denom)


# --- sensitivity ---------------------------------------------------------------


def default_variants(fmt="int8", granularity=None) -> dict[str, HaloScheme]:
    """The three probes: forward-only, backward-only, and forward with a Middle rotation."""
    base = HaloScheme.preset("halo0", fmt, granularity)
    M = frozenset("M")
    return {
        "fwd": replace(base, quantized=frozenset("F"), name="fwd"),
        "bwd": replace(base, quantized=frozenset("EG"), name="bwd"),
        "fwd+had": replace(base, placement_F=M, quantized=frozenset("F"), name="fwd+had"),
    }


def weight_gradients(model: ToyModel, batch, scheme: HaloScheme, loss: str = "mse") -> dict[str, np.ndarray]:
    x, y = batch
    m = model.with_scheme(scheme)
    out, cache = m.forward(x)
    _, e = LOSSES[loss](out, y)
    grads = m.backward(cache, e)
    return {k: grads[f"{k}.W"] for k in m.linear_names}


@dataclass
class SensitivityReport:
    rows: list[tuple[str, str, float, int]] = field(default_factory=list)  # layer, variant, cosine, params
    averages: dict[str, float] = field(default_factory=dict)

    def table(self, variant: str) -> list[tuple[str, float, int]]:
        return [(l, c, n) for l, v, c, n in self.rows if v == variant]

    def ordering(self) -> dict[str, bool]:
        a = self.averages
        return {"fwd<bwd": a["fwd"] < a["bwd"], "had>fwd": a["fwd+had"] > a["fwd"]}

    def verdict_line(self) -> str:
        o = self.ordering()
        return ", ".join(f"{k}: {'PASS' if v else 'FAIL'}" for k, v in o.items())

    def to_csv(self, variant: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if variant is None:
            w.writerow(["layer", "variant", "cosine"])
            for l, v, c, _ in self.rows:
                w.writerow([l, v, repr(c)])
        else:
            w.writerow(["layer", "cosine", "param_count"])
            for l, c, n in self.table(variant):
                w.writerow([l, repr(c), n])
        return buf.getvalue()


def sensitivity_report(model: ToyModel, batch, variants: dict[str, HaloScheme] | None = None,
                       loss: str = "mse") -> SensitivityReport:
    """Per-layer cosine between each variant's weight gradients and the exact ones.

    The average is weighted by each layer's parameter count.
    """
    variants = variants or default_variants()
    exact = weight_gradients(model, batch, HaloScheme(quantized=frozenset(), name="exact"), loss)
    rep = SensitivityReport()
    for vname, scheme in variants.items():
        g = weight_gradients(model, batch, scheme, loss)
        num = den = 0.0
        for layer, ge in exact.items():
            c = cosine_similarity(g[layer], ge)
            n = ge.size
            rep.rows.append((layer, vname, c, n))
            num += c * n
            den += n
        rep.averages[vname] = num / den
    return rep


# --- placement ablation --------------------------------------------------------


@dataclass
class AblationRow:
    placement: str
    loss: float
    cosine: float


def _eval_scheme(model: ToyModel, batch, scheme: HaloScheme, exact, loss: str) -> AblationRow:
    x, y = batch
    m = model.with_scheme(scheme)
    out, cache = m.forward(x)
    value, e = LOSSES[loss](out, y)
    grads = m.backward(cache, e)
    num = den = 0.0
    for layer, ge in exact.items():
        num += cosine_similarity(grads[f"{layer}.W"], ge) * ge.size
        den += ge.size
    return AblationRow(scheme.placement_string, value, num / den)


def placement_ablation(model: ToyModel, batch, matmul: str | None = "F", fmt="int8",
                       granularity=None, loss: str = "mse") -> list[AblationRow]:
    """Loss and weighted gradient cosine for each placement subset.

    With ``matmul`` set, only that product is quantized and its 8 placement
    subsets are enumerated.  With ``matmul=None`` all three products are
    quantized and all 512 modes are enumerated.
    """
    f = NumericFormat.parse(fmt)
    exact = weight_gradients(model, batch, HaloScheme(quantized=frozenset()), loss)
    base = HaloScheme.preset("halo0", f, granularity)
    rows = []
    if matmul is None:
        for pf, pe, pg in all_modes():
            s = replace(base, placement_F=pf, placement_E=pe, placement_G=pg, name="")
            rows.append(_eval_scheme(model, batch, s, exact, loss))
        return rows
    matmul = matmul.upper()
    if matmul not in MATMULS:
        raise ValueError(f"matmul must be one of {MATMULS}, got {matmul!r}")
    for p in PLACEMENTS:
        s = replace(base, quantized=frozenset(matmul), name="",
                    **{f"placement_{matmul}": p})
        rows.append(_eval_scheme(model, batch, s, exact, loss))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["placement", "loss", "cosine"])
    for r in rows:
        w.writerow([r.placement, repr(r.loss), repr(r.cosine)])
    return buf.getvalue()


def ablation_cell(rows: list[AblationRow], matmul: str, placement) -> AblationRow:
    """Look up the row whose ``matmul`` placement equals ``placement`` (others empty)."""
    want = placement_str(frozenset(placement))
    for r in rows:
        parts = dict(p.split(":") for p in r.placement.split(";"))
        if parts[matmul] == want and all(v == "O" for k, v in parts.items() if k != matmul):
            return r
    raise KeyError(f"{matmul}:{want}")
