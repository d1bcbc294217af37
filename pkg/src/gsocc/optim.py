"""AdamW with decoupled weight decay and optional linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError


@dataclass
class OptimState:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        """Learning rate for the next step (linear warmup, then constant)."""
        if self.warmup_steps and self.step < self.warmup_steps:
            return self.lr * (self.step + 1) / self.warmup_steps
        return self.lr


def optimizer_step(state: OptimState, params: dict, grads: dict) -> dict:
    """One AdamW update; returns new parameter arrays and advances ``state``."""
    lr = state.current_lr()
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name in sorted(params):
        p = np.asarray(params[name], dtype=np.float64)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = p - lr * state.weight_decay * p - lr * update
    return out
