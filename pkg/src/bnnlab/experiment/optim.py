"""Adam with bias correction and a multi-step learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ContractViolation, ShapeError


@dataclass(frozen=True)
class AdamHyper:
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, hyper: AdamHyper, lr: float,
              clip: Sequence[bool] | None = None):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not
    modified. Parameters flagged in ``clip`` are clamped to [-1, 1] afterwards."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and state must have the same length")
    t = state.t + 1
    c1 = 1.0 - hyper.b1 ** t
    c2 = 1.0 - hyper.b2 ** t
    new_p, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"parameter {i}: shapes {p.shape}, {g.shape}, {m.shape}, {v.shape}")
        m = hyper.b1 * m + (1.0 - hyper.b1) * g
        v = hyper.b2 * v + (1.0 - hyper.b2) * g * g
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if clip is not None and clip[i]:
            p = np.clip(p, -1.0, 1.0)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass(frozen=True)
class StepSchedule:
    """Base rate divided by ``decay`` once per milestone reached
    (inclusive: the decay applies from the milestone epoch on)."""

    base_lr: float = 1e-3
    milestones: tuple[int, ...] = (16, 24, 28)
    decay: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.base_lr > 0:
            raise ContractViolation("learning rate must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ContractViolation("milestones must be strictly increasing")
        if not self.decay >= 1:
            raise ContractViolation("decay divisor must be at least 1")


def lr_at_epoch(schedule: StepSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ContractViolation("epoch must be non-negative")
    passed = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.base_lr / schedule.decay ** passed
