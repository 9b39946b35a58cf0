"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, decay=None):
    """Update ``params`` in place.

    ``params`` and ``grads`` are dicts keyed by parameter name (arrays, or
    ``None`` grads for parameters that received none).  ``decay`` optionally
    maps a name to whether weight decay applies to it (default: all).
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros(p.shape, dtype=np.float64)
            v = state.second_moment[name] = np.zeros(p.shape, dtype=np.float64)
        g64 = g.astype(np.float64)
        # moments and the update are formed in place in float64
        m *= b1
        m += (1.0 - b1) * g64
        g64 *= g64
        v *= b2
        v += (1.0 - b2) * g64
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p64 = p.astype(np.float64)
        if decay is None or decay.get(name, True):
            p64 *= 1.0 - lr * state.weight_decay
        p64 -= step
        p[...] = p64


@dataclass
class CosineSchedule:
    base_lr: float = 1e-4
    min_lr: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.base_lr < 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ContractError("need 0 <= min_lr <= base_lr")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractError("need 0 <= warmup_steps <= total_steps")


def lr_at(schedule, step):
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span if span > 0 else 0.0
    lo, hi = schedule.min_lr, schedule.base_lr
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * progress))
