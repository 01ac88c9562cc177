"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError


@dataclass
class OptimState:
    lr0: float = 1e-4
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    no_decay: tuple = ("rho", "background")
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def cosine_lr(state: OptimState, step=None):
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if state.total_steps <= 0:
        raise DomainError("total_steps must be positive")
    k = state.step if step is None else step
    if not 0 <= k <= state.total_steps:
        raise DomainError(f"step {k} outside [0, {state.total_steps}]")
    return state.lr0 * 0.5 * (1.0 + math.cos(math.pi * k / state.total_steps))


def adamw_step(state: OptimState, params: dict, grads: dict, lr=None, post_step=None):
    """One in-place AdamW update of ``params`` (name -> array).

    The learning rate defaults to the cosine schedule at the current step;
    ``post_step`` (e.g. clamping colors to [0, 1]) runs after the update.
    """
    if lr is None:
        lr = cosine_lr(state)
    for name in grads:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        if name not in grads:
            continue
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.first.setdefault(name, np.zeros_like(p))
        v = state.second.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if name not in state.no_decay and state.weight_decay:
            update = update + state.weight_decay * p
        p -= np.asarray(lr * update, dtype=p.dtype)
    if post_step is not None:
        post_step()
    return params
