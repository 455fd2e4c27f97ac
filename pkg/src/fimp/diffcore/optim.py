"""AdamW with decoupled weight decay and the cosine annealing schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fimp.diffcore.params import ParamStore
from fimp.errors import NonFiniteGradientError


@dataclass
class OptimizerState:
    """Moment accumulators plus the schedule bounds."""

    base_lr: float = 0.0005
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_epochs: int = 64
    lr: float = None  # current (scheduled) rate
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr is None:
            self.lr = self.base_lr


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * epoch / total)), clamped at 0."""
    if total <= 0:
        raise ValueError("total epochs must be positive")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return max(lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total)), 0.0)


def adamw_step(params: ParamStore, state: OptimizerState) -> None:
    """Apply one decoupled-weight-decay Adam update; clears gradients.

    Aborts (raising, with the offending names) before touching any
    parameter if a gradient is non-finite.
    """
    bad = [name for name, p in params.items()
           if p.grad is not None and not np.isfinite(p.grad).all()]
    if bad:
        raise NonFiniteGradientError(bad)

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    lr = state.lr
    wd = state.weight_decay
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if wd != 0.0:
            p.data *= 1.0 - lr * wd
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad[...] = 0


def optimizer_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    """Flatten moments for checkpointing (prefixed to avoid name clashes)."""
    out = {}
    for name, arr in state.m.items():
        out[f"optim.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"optim.v.{name}"] = arr
    return out


def restore_optimizer(state: OptimizerState, arrays: dict[str, np.ndarray]) -> None:
    for key, arr in arrays.items():
        if key.startswith("optim.m."):
            state.m[key[len("optim.m."):]] = arr.astype(np.float32).copy()
        elif key.startswith("optim.v."):
            state.v[key[len("optim.v."):]] = arr.astype(np.float32).copy()
