"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError


@dataclass
class AdamWState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamWState,
    lr: float | None = None,
    lr_scales: list[float] | None = None,
) -> list[np.ndarray]:
    """One AdamW update, in place on ``params`` (which are also returned).

    ``lr`` overrides ``state.lr`` for this step (used by the scheduler);
    ``lr_scales`` multiplies the rate per parameter, e.g. 0.1 for a backbone.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adamw_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    base = state.lr if lr is None else lr
    scales = lr_scales or [1.0] * len(params)
    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"adamw_step: parameter {i} has shape {p.shape}, gradient {g.shape}")
        rate = base * scales[i]
        p *= 1.0 - rate * state.weight_decay
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        p -= rate * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
    return params


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    step = min(max(step, 0), total_steps)
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
