"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .engine import backward


def numeric_grad(fn, param, h=1e-5):
    """Central differences of scalar ``fn()`` with respect to every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn, params, h=1e-5, floor=1e-6):
    """Return the largest relative error between backward() and finite differences.

    ``fn`` rebuilds the scalar loss from the current parameter values on each
    call; parameters are perturbed in place and restored.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numeric_grad(fn, p, h), floor))
    return worst
