"""Adam/AdamW updates, step learning-rate schedules and gradient clipping."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import ShapeError


@dataclass
class OptimizerState:
    lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _grads_for(params, grads):
    if grads is None:
        grads = [p.grad for p in params]
    out = []
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"optimizer: gradient shape {g.shape} != parameter shape {p.data.shape}")
        out.append(g)
    return out


def _moment_update(state, params, grads, decoupled):
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer: state holds {len(state.m)} parameters, got {len(params)}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            if decoupled:
                p.data *= 1.0 - state.lr * state.weight_decay
            else:
                g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def adamw_step(state, params, grads=None):
    """One AdamW step (decoupled weight decay). Mutates ``params`` in place."""
    return _moment_update(state, params, _grads_for(params, grads), decoupled=True)


def adam_step(state, params, grads=None):
    """One Adam step with classical L2-coupled weight decay."""
    return _moment_update(state, params, _grads_for(params, grads), decoupled=False)


@dataclass(frozen=True)
class LrSchedule:
    base: float
    milestones: tuple = ()
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(sorted(self.milestones)))


def lr_at(schedule, epoch):
    """Multi-step decay: base * gamma ** (number of milestones <= epoch)."""
    passed = bisect.bisect_right(schedule.milestones, epoch)
    return schedule.base * schedule.gamma**passed


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; return the scale."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    # small slack so an already-clipped set is left untouched (idempotence)
    if norm <= max_norm * (1.0 + 1e-12):
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


class Optimizer:
    """Stateful wrapper pairing a parameter list with an update rule."""

    def __init__(self, params, lr, kind="adamw", betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        update = adamw_step if self.kind == "adamw" else adam_step
        update(self.state, self.params)
