"""Parameter containers and the layers shared by every model in the package."""
from __future__ import annotations

import math

import numpy as np

from .engine import ShapeError, Tensor, layer_norm, matmul, reshape, softmax, transpose


class ConfigError(ValueError):
    pass


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def truncated_normal(rng, shape, std, mean=0.0, bound=2.0):
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.normal(mean, std, size=shape)
    bad = np.abs(out - mean) > bound * std
    while bad.any():
        out[bad] = rng.normal(mean, std, size=int(bad.sum()))
        bad = np.abs(out - mean) > bound * std
    return out


class Module:
    """Minimal container: parameters are Tensor attributes with requires_grad."""

    trainable = True

    def named_parameters(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix + key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.shape != own[name].shape:
                raise ShapeError(f"{name}: expected {own[name].shape}, got {value.shape}")
            own[name].data = value.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x W^T + b with W stored as (out, in)."""

    def __init__(self, in_features, out_features, rng, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(uniform_fan_in(rng, (out_features, in_features), in_features))
        self.bias = parameter(uniform_fan_in(rng, (out_features,), in_features)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear: input width {x.shape[-1]} != {self.in_features}")
        lead = x.shape[:-1]
        if len(lead) != 1:
            # one large GEMM instead of a stack of small ones
            x = reshape(x, (-1, self.in_features))
        y = matmul(x, transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return reshape(y, (*lead, self.out_features)) if len(lead) != 1 else y


class MLP(Module):
    """Two affine maps with a ReLU between them."""

    def __init__(self, in_features, hidden, out_features, rng):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, out_features, rng)

    def forward(self, x):
        return self.fc2(self.fc1(x).relu())


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


def split_heads(x, heads):
    *lead, seq, d = x.shape
    x = reshape(x, (*lead, seq, heads, d // heads))
    n = len(lead)
    return transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x):
    *lead, heads, seq, dh = x.shape
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(x, (*lead, seq, heads * dh))


def scaled_dot_product_attention(q, k, v, heads, out_proj=None):
    """Multi-head attention on already-projected q, k, v of shape (..., S, d).

    Per head: softmax(q k^T / sqrt(d / heads)) v. Heads are concatenated and,
    when ``out_proj`` is given, passed through it.
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    if k.shape != v.shape or q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = matmul(qh, transpose(kh)) * (1.0 / math.sqrt(d // heads))
    out = merge_heads(matmul(softmax(scores, axis=-1), vh))
    return out_proj(out) if out_proj is not None else out


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ConfigError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x):
        return scaled_dot_product_attention(self.q(x), self.k(x), self.v(x), self.heads, self.out)


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)) with a 4d ReLU hidden layer."""

    def __init__(self, d, heads, rng, ff_mult=4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = MLP(d, ff_mult * d, d, rng)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))
