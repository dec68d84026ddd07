"""AdamW with decoupled weight decay and a single-cycle cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import Module


def cosine_anneal_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """``min + (base - min) * (1 + cos(pi * step / total)) / 2``; clamps past the end."""
    if total_steps <= 0 or step >= total_steps:
        return min_lr
    step = max(step, 0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    total_steps: int = 0
    min_lr: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.total_steps <= 0:
            return self.lr
        return cosine_anneal_lr(self.step, self.total_steps, self.lr, self.min_lr)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in
                ("lr", "beta1", "beta2", "eps", "weight_decay", "total_steps", "min_lr", "step")}


def adamw_step(model: Module, st: OptimizerState, grads: Optional[dict] = None) -> float:
    """Apply one AdamW update in place and return the learning rate used.

    ``grads`` maps parameter names to arrays and defaults to each
    parameter's ``.grad``; missing gradients count as zero. All gradients
    are validated before any parameter moves.
    """
    named = model.named_parameters()
    if grads is None:
        grads = {name: p.grad for name, p in named}
    resolved = {}
    for name, p in named:
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name}; step rejected")
        resolved[name] = g

    lr = st.current_lr()
    st.step += 1
    t = st.step
    bc1 = 1.0 - st.beta1 ** t
    bc2 = 1.0 - st.beta2 ** t
    for name, p in named:
        g = resolved[name]
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        if st.weight_decay:
            p.data *= 1.0 - lr * st.weight_decay
        denom = np.sqrt(v / bc2) + st.eps
        p.data -= (lr / bc1) * m / denom
    return lr
