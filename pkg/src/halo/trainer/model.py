"""A small residual MLP stack built from HALO linear layers.

Each block computes ``h <- h + W2 act(W1 rmsnorm(h))``; a working-precision
linear head maps the residual stream to the outputs.  Only the block linears
are quantized, mirroring how embeddings and the LM head stay in the original
precision in full-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..halo_linear import HaloLinear, HaloScheme
from ..tensor_core import OutlierProfile, inject_outliers
from .norm import rmsnorm_backward, rmsnorm_forward


def _sigmoid(x):
    # tanh form never overflows, unlike 1 / (1 + exp(-x))
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class ModelConfig:
    d_model: int = 64
    d_hidden: int = 128
    n_blocks: int = 2
    d_out: int = 16
    use_gain: bool = True
    lora_rank: int = 0
    seed: int = 0
    dtype: str = "float64"
    # outlier structure imposed on the initial weights
    gain_outliers: int = 0
    gain_outlier_scale: float = 1.0
    hidden_outliers: int = 0
    hidden_outlier_scale: float = 1.0


class ToyModel:
    def __init__(self, config: ModelConfig, scheme: HaloScheme | str = "halo0", params=None):
        if isinstance(scheme, str):
            scheme = HaloScheme.parse(scheme)
        self.config = config
        self.scheme = scheme
        self.dtype = np.dtype(config.dtype)
        if params is None:
            params = init_params(config)
        self.params = {k: np.array(v, dtype=self.dtype, copy=True) for k, v in params.items()}
        self.layers: dict[str, HaloLinear] = {}
        self._build_layers()

    def _build_layers(self):
        for i in range(self.config.n_blocks):
            for j in (1, 2):
                name = f"blocks.{i}.lin{j}"
                U = self.params.get(f"{name}.U")
                V = self.params.get(f"{name}.V")
                # layers alias the parameter arrays; optimizer updates are in place
                self.layers[name] = HaloLinear(self.params[f"{name}.W"], self.scheme, U, V)
                self.layers[name].W = self.params[f"{name}.W"]
                if U is not None:
                    self.layers[name].U = self.params[f"{name}.U"]
                    self.layers[name].V = self.params[f"{name}.V"]

    def with_scheme(self, scheme: HaloScheme | str) -> "ToyModel":
        """A copy with the same parameter values running under another scheme."""
        return ToyModel(self.config, scheme, self.params)

    @property
    def linear_names(self) -> list[str]:
        return list(self.layers)

    def trainable(self) -> list[str]:
        if self.scheme.peft:
            return [k for k in self.params if k.endswith(".U") or k.endswith(".V")]
        return [k for k in self.params if not (k.endswith(".U") or k.endswith(".V"))]

    def counters(self) -> dict[str, dict]:
        return {k: dict(l.counters) for k, l in self.layers.items()}

    # -- passes

    def forward(self, x, gathered=None):
        """Return ``(out, cache)``; ``gathered`` maps layer name -> quantized weight."""
        gathered = gathered or {}
        h = np.asarray(x, dtype=self.dtype)
        cache = []
        for i in range(self.config.n_blocks):
            z = rmsnorm_forward(h, self.params.get(f"blocks.{i}.gain"))
            l1, l2 = self.layers[f"blocks.{i}.lin1"], self.layers[f"blocks.{i}.lin2"]
            a, ctx1 = l1.forward(z, gathered.get(f"blocks.{i}.lin1"))
            o, ctx2 = l2.forward(silu(a), gathered.get(f"blocks.{i}.lin2"))
            cache.append((h, a, ctx1, ctx2))
            h = h + o
        out = h @ self.params["head"].T
        cache.append(h)
        return out, cache

    def backward(self, cache, e_out, gathered=None, recompute=None):
        """Gradients for every parameter given ``dL/d out``.

        ``gathered`` optionally supplies backward-pass quantized weights;
        ``recompute(i)`` (activation checkpointing) returns a fresh
        ``(h, a, ctx1, ctx2)`` for block ``i`` instead of the cached one.
        """
        gathered = gathered or {}
        grads: dict[str, np.ndarray] = {}
        h_final = cache[-1]
        grads["head"] = e_out.T @ h_final
        e_h = e_out @ self.params["head"]
        for i in reversed(range(self.config.n_blocks)):
            h, a, ctx1, ctx2 = recompute(i) if recompute else cache[i]
            n1, n2 = f"blocks.{i}.lin1", f"blocks.{i}.lin2"
            g2 = self.layers[n2].backward(ctx2, e_h, gathered.get(n2))
            e_a = g2.e_x * silu_grad(a)
            g1 = self.layers[n1].backward(ctx1, e_a, gathered.get(n1))
            gain = self.params.get(f"blocks.{i}.gain")
            e_in, dgain = rmsnorm_backward(h, g1.e_x, gain)
            for name, g in ((n1, g1), (n2, g2)):
                if g.g is not None:
                    grads[f"{name}.W"] = g.g
                if g.g_u is not None:
                    grads[f"{name}.U"] = g.g_u
                    grads[f"{name}.V"] = g.g_v
            if dgain is not None:
                grads[f"blocks.{i}.gain"] = dgain
            e_h = e_h + e_in
        grads["input"] = e_h
        return grads

    def block_forward(self, i, h, gathered=None):
        gathered = gathered or {}
        gain = self.params.get(f"blocks.{i}.gain")
        z = rmsnorm_forward(h, gain)
        a, ctx1 = self.layers[f"blocks.{i}.lin1"].forward(z, gathered.get(f"blocks.{i}.lin1"))
        o, ctx2 = self.layers[f"blocks.{i}.lin2"].forward(silu(a), gathered.get(f"blocks.{i}.lin2"))
        return (h, a, ctx1, ctx2), h + o


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    d, hdim = config.d_model, config.d_hidden
    p: dict[str, np.ndarray] = {}
    for i in range(config.n_blocks):
        if config.use_gain:
            gain = np.ones(d)
            if config.gain_outliers:
                prof = OutlierProfile.random(d, config.gain_outliers, config.gain_outlier_scale,
                                             "columns", seed=rng.integers(2**31))
                gain = inject_outliers(gain[None, :], prof, None)[0].astype(np.float64)
            p[f"blocks.{i}.gain"] = gain
        # rmsnorm outputs unit rows, so unit-variance W1 gives O(1) pre-activations
        w1 = rng.standard_normal((hdim, d))
        if config.hidden_outliers:
            prof = OutlierProfile.random(hdim, config.hidden_outliers, config.hidden_outlier_scale,
                                         "rows", seed=rng.integers(2**31))
            w1 = inject_outliers(w1, prof, None).astype(np.float64)
        p[f"blocks.{i}.lin1.W"] = w1
        p[f"blocks.{i}.lin2.W"] = rng.standard_normal((d, hdim)) / np.sqrt(hdim)
        if config.lora_rank:
            r = config.lora_rank
            p[f"blocks.{i}.lin1.U"] = rng.standard_normal((r, d)) / np.sqrt(d)
            p[f"blocks.{i}.lin1.V"] = np.zeros((hdim, r))
            p[f"blocks.{i}.lin2.U"] = rng.standard_normal((r, hdim)) / np.sqrt(hdim)
            p[f"blocks.{i}.lin2.V"] = np.zeros((d, r))
    p["head"] = rng.standard_normal((config.d_out, d)) / np.sqrt(d)
    return p


# --- losses -------------------------------------------------------------------


def mse_loss(out, target):
    diff = out - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_loss(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


LOSSES = {"mse": mse_loss, "ce": cross_entropy_loss}
