"""Spatio-temporal backends: (last patches (B, N, L, C), adjacency) -> hidden (B, N, d').

Two small models share the contract. ``GatedTCN`` stacks gated dilated
temporal convolutions with one-hop graph mixing; ``GraphGRU`` runs a gated
recurrent cell whose hidden state is mixed over the graph at every step.
"""
from __future__ import annotations

import numpy as np

from .tensor_core import ConfigError, Linear, Module, ShapeError, Tensor, matmul, reshape


def normalized_adjacency(A):
    """D~^-1 (A + I), row-normalised. A: (N, N) or (B, N, N), Tensor or array."""
    A = A if isinstance(A, Tensor) else Tensor(A)
    N = A.shape[-1]
    if A.shape[-2] != N:
        raise ShapeError(f"adjacency must be square, got {A.shape}")
    a = A + np.eye(N)
    return a / a.sum(axis=-1, keepdims=True)


def graph_mix(Ahat, x):
    """Mix (B, N, ...) features over nodes with a row-normalised adjacency."""
    B, N = x.shape[0], x.shape[1]
    flat = reshape(x, (B, N, -1))
    return reshape(matmul(Ahat, flat), x.shape)


def _check_finite(t, where):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite activations in {where}")


class GatedTCN(Module):
    def __init__(self, L, C, d_out, rng, dilations=(1, 2)):
        if 1 + sum(dilations) > L:
            raise ConfigError(f"patch length {L} too short for dilations {dilations}")
        self.L, self.C, self.d_out = L, C, d_out
        self.dilations = tuple(dilations)
        self.inp = Linear(C, d_out, rng)
        # per layer: filter and gate taps (t, t + dilation) and the mixing map W
        self.filt0 = [Linear(d_out, d_out, rng) for _ in dilations]
        self.filt1 = [Linear(d_out, d_out, rng, bias=False) for _ in dilations]
        self.gate0 = [Linear(d_out, d_out, rng) for _ in dilations]
        self.gate1 = [Linear(d_out, d_out, rng, bias=False) for _ in dilations]
        self.mix = [Linear(d_out, d_out, rng) for _ in dilations]

    def forward(self, X, A):
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.ndim != 4 or X.shape[2:] != (self.L, self.C):
            raise ShapeError(f"backend input must be (B, N, {self.L}, {self.C}), got {X.shape}")
        Ahat = normalized_adjacency(A)
        x = self.inp(X)
        for i, dil in enumerate(self.dilations):
            T = x.shape[2]
            early, late = x[:, :, : T - dil], x[:, :, dil:]
            h = (self.filt0[i](early) + self.filt1[i](late)).tanh() * \
                (self.gate0[i](early) + self.gate1[i](late)).sigmoid()
            x = late + self.mix[i](graph_mix(Ahat, h))
        out = x.mean(axis=2)
        _check_finite(out, "GatedTCN")
        return out


class GraphGRU(Module):
    def __init__(self, L, C, d_out, rng):
        self.L, self.C, self.d_out = L, C, d_out
        self.xz, self.hz = Linear(C, d_out, rng), Linear(d_out, d_out, rng, bias=False)
        self.xr, self.hr = Linear(C, d_out, rng), Linear(d_out, d_out, rng, bias=False)
        self.xc, self.hc = Linear(C, d_out, rng), Linear(d_out, d_out, rng, bias=False)

    def forward(self, X, A):
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.ndim != 4 or X.shape[2:] != (self.L, self.C):
            raise ShapeError(f"backend input must be (B, N, {self.L}, {self.C}), got {X.shape}")
        Ahat = normalized_adjacency(A)
        B, N = X.shape[0], X.shape[1]
        h = Tensor(np.zeros((B, N, self.d_out)))
        for t in range(self.L):
            x = X[:, :, t]
            m = graph_mix(Ahat, h)
            z = (self.xz(x) + self.hz(m)).sigmoid()
            r = (self.xr(x) + self.hr(m)).sigmoid()
            c = (self.xc(x) + self.hc(graph_mix(Ahat, r * h))).tanh()
            h = (1.0 - z) * h + z * c
        _check_finite(h, "GraphGRU")
        return h


BACKENDS = {"tcn": GatedTCN, "gru": GraphGRU}


def make_backend(name, L, C, d_out, rng):
    if name not in BACKENDS:
        raise ConfigError(f"unknown backend {name!r}; expected one of {sorted(BACKENDS)}")
    return BACKENDS[name](L, C, d_out, rng)
