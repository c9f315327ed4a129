from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 20

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step`` with linear warm-up."""
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Decoupled-weight-decay Adam updating parameter arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], names, config: AdamWConfig):
        self.params = params
        self.names = list(names)
        self.config = config
        self.state = OptimizerState(
            {k: np.zeros_like(params[k]) for k in self.names},
            {k: np.zeros_like(params[k]) for k in self.names},
        )

    def step(self, grads: dict[str, np.ndarray]) -> float:
        c = self.config
        st = self.state
        st.step += 1
        lr = c.lr_at(st.step)
        bc1 = 1.0 - c.beta1**st.step
        bc2 = 1.0 - c.beta2**st.step
        for k in self.names:
            g = grads[k]
            p = self.params[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            st.m[k] = c.beta1 * st.m[k] + (1.0 - c.beta1) * g
            st.v[k] = c.beta2 * st.v[k] + (1.0 - c.beta2) * g * g
            if lr == 0.0:
                continue
            if c.weight_decay:
                p -= lr * c.weight_decay * p
            p -= lr * (st.m[k] / bc1) / (np.sqrt(st.v[k] / bc2) + c.eps)
        return lr
