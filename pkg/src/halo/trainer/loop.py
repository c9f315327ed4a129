"""Fixed-step training loop, optionally under the HQ-FSDP simulator."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..halo_linear import HaloScheme
from ..hqfsdp import HQFSDP, CommLedger, WorldConfig, running_mean
from .data import Dataset
from .model import LOSSES, ToyModel
from .optim import AdamW, AdamWConfig

DIVERGENCE_THRESHOLD = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, grad_norm: float | None = None):
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm
        super().__init__(
            f"training diverged at step {step}: loss={loss!r}"
            + ("" if grad_norm is None else f", last grad norm={grad_norm!r}")
            + f" (threshold {DIVERGENCE_THRESHOLD:g} or non-finite)"
        )


@dataclass
class TrainResult:
    losses: list[float]
    grad_norms: list[float]
    eval_loss: float
    counters: dict[str, int]
    params: dict[str, np.ndarray]
    ledger: CommLedger | None = None
    lrs: list[float] = field(default_factory=list)

    def trace_rows(self):
        return [(i, l, g) for i, (l, g) in enumerate(zip(self.losses, self.grad_norms))]


def _check(step, loss, gnorm=None):
    if not math.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
        raise DivergenceError(step, loss, gnorm)


def evaluate(model: ToyModel, dataset: Dataset) -> float:
    x, y = dataset.eval_batch()
    out, _ = model.forward(x)
    loss, _ = LOSSES[dataset.loss](out, y)
    return loss


def _fsdp_rotation(scheme: HaloScheme) -> bool:
    """Whether gathered weights are ``(W H)_Q``; checks the scheme can consume them."""
    f_rot = "M" in scheme.placement_F
    if "R" in scheme.placement_F or "M" in scheme.placement_E:
        raise ValueError("HQ-FSDP gathers W or WH; this placement needs another weight rotation")
    if ("F" in scheme.quantized) != ("E" in scheme.quantized) or (
        "E" in scheme.quantized and ("R" in scheme.placement_E) != f_rot
    ):
        raise ValueError("HQ-FSDP reuses one gathered weight in forward and backward; "
                         f"scheme {scheme.label} quantizes W differently in F and E")
    return f_rot


def train(model: ToyModel, dataset: Dataset, optimizer_config: AdamWConfig | None = None,
          scheme: HaloScheme | str | None = None, steps: int = 200,
          world: WorldConfig | None = None, debug: bool = False) -> TrainResult:
    """Train ``model`` in place for ``steps`` steps and return the trace.

    With ``world`` the linear weights live in the HQ-FSDP simulator: each
    step gathers ``(W H)_Q`` for the forward, re-gathers it with the saved
    scale for the backward, and averages gradients with a rank-ordered
    reduce-scatter.  Every rank sees the same batch, so the protocol changes
    communication only, never the numbers.
    """
    if scheme is not None:
        model = model.with_scheme(scheme)
    optimizer_config = optimizer_config or AdamWConfig()
    loss_fn = LOSSES[dataset.loss]
    for layer in model.layers.values():
        layer.reset_counters()
    names = model.trainable()
    opt = AdamW(model.params, names, optimizer_config)

    sim = None
    if world is not None:
        s = model.scheme
        sim = HQFSDP(world, s.format_W, _fsdp_rotation(s), debug=debug)
        for lname in model.layers:
            if world.is_sharded(f"{lname}.W"):
                sim.register(lname, model.params[f"{lname}.W"])

    losses, norms, lrs = [], [], []
    for step in range(steps):
        x, y = dataset.batch(step)
        fwd_w = bwd_w = None
        recompute = None
        if sim is not None:
            fwd_w = {k: sim.forward_weight(k) for k in sim.params}
        out, cache = model.forward(x, fwd_w)
        loss, e_out = loss_fn(out, y)
        _check(step, loss, norms[-1] if norms else None)
        if sim is not None:
            bwd_w = {k: sim.backward_weight(k) for k in sim.params}
            if world.activation_checkpointing:
                # only block inputs are kept; interiors are rebuilt from the backward gather
                def recompute(i, _c=cache, _w=bwd_w):
                    return model.block_forward(i, _c[i][0], _w)[0]
        grads = model.backward(cache, e_out, bwd_w, recompute)
        grads = {k: grads[k] for k in names}
        if sim is not None:
            ws = world.world_size
            for k in names:
                lname = k[: -len(".W")] if k.endswith(".W") else None
                if lname in sim.params:
                    shards = sim.step_grads(lname, [grads[k]] * ws)
                    grads[k] = np.vstack(shards)[: grads[k].shape[0]]
                else:
                    grads[k] = running_mean([grads[k]] * ws)  # replicated params: all-reduce
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        losses.append(loss)
        norms.append(gnorm)
        lrs.append(opt.step(grads))
        if sim is not None:
            for lname, p in sim.params.items():
                p.update_rows(model.params[f"{lname}.W"])

    # counters cover the training steps only, not the held-out evaluation
    total = Counter()
    for c in model.counters().values():
        total.update(c)
    eval_loss = evaluate(model, dataset)
    _check(steps, eval_loss)
    return TrainResult(
        losses, norms, eval_loss, dict(total),
        {k: v.copy() for k, v in model.params.items()},
        sim.ledger if sim is not None else None, lrs,
    )
