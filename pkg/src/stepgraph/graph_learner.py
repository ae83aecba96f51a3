"""Discrete dependency-graph learning.

Each node gets a static global feature G (convolutions over its whole
training series) and a per-window feature Z = relu(FC(H)) + G from its
patch representations. A pairwise head maps Z_i || Z_j to two logits
(index 0 is the edge class). A kNN graph over node features regularises
the edge probabilities, and Gumbel-softmax draws a differentiable graph.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .data import atomic_write
from .tensor_core import (
    ConfigError,
    Linear,
    MLP,
    Module,
    ShapeError,
    Tensor,
    broadcast_to,
    clip,
    concat,
    conv1d,
    parameter,
    reshape,
    softmax,
    uniform_fan_in,
)

EPS = 1e-8
SOURCES = ("representations", "raw-series")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphConfig:
    d_g: int = 32
    k: int = 10
    tau: float = 0.5
    anneal: bool = False  # linear 1.0 -> 0.1 over the run instead of a fixed tau
    source: str = "representations"
    gsl: bool = True
    conv_channels: tuple = (8, 16)
    kernel: int = 10
    stride: int = 1
    hidden: int = 64

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown similarity source {self.source!r}; expected one of {SOURCES}")
        if self.k < 1 or self.d_g < 1 or self.kernel < 1 or self.stride < 1:
            raise ConfigError("k, d_g, kernel and stride must be >= 1")


def tau_at(config, epoch, epochs):
    if not config.anneal:
        return config.tau
    frac = 0.0 if epochs <= 1 else (epoch - 1) / (epochs - 1)
    return 1.0 + (0.1 - 1.0) * min(max(frac, 0.0), 1.0)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1):
        fan_in = c_in * kernel
        self.weight = parameter(uniform_fan_in(rng, (c_out, c_in, kernel), fan_in))
        self.bias = parameter(uniform_fan_in(rng, (c_out,), fan_in))
        self.stride = stride

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, stride=self.stride)


def conv_output_length(T, config):
    for _ in config.conv_channels:
        if T < config.kernel:
            return 0
        T = (T - config.kernel) // config.stride + 1
    return T


def receptive_field(config):
    rf = 1
    jump = 1
    for _ in config.conv_channels:
        rf += (config.kernel - 1) * jump
        jump *= config.stride
    return rf


class GraphLearner(Module):
    """Parameters for G, Z and the pairwise head.

    ``T_train`` and ``channels`` fix the width of the flattened conv output;
    ``rep_width`` is P*d of the encoder the learner reads from.
    """

    def __init__(self, config, T_train, channels, rep_width, rng):
        self.config = config
        if T_train < receptive_field(config):
            raise GraphError(f"training split has {T_train} steps, shorter than the global-feature "
                             f"receptive field {receptive_field(config)}")
        widths = (channels,) + tuple(config.conv_channels)
        self.convs = [Conv1d(widths[i], widths[i + 1], config.kernel, rng, config.stride)
                      for i in range(len(config.conv_channels))]
        self.T_train = T_train
        flat = widths[-1] * conv_output_length(T_train, config)
        self.global_fc = Linear(flat, config.d_g, rng)
        self.node_fc = Linear(rep_width, config.d_g, rng)
        self.pair = MLP(2 * config.d_g, config.hidden, 2, rng)
        self.rep_width = rep_width

    def global_features(self, series):
        """series: (N, T_train, C) training values -> G: (N, d_g)."""
        series = np.asarray(series, dtype=np.float64)
        if series.ndim != 3 or series.shape[1] != self.T_train:
            raise ShapeError(f"global_features: expected (N, {self.T_train}, C), got {series.shape}")
        x = Tensor(np.ascontiguousarray(series.transpose(0, 2, 1)))
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = x.relu()
        return self.global_fc(reshape(x, (x.shape[0], -1)))

    def node_embeddings(self, H, G):
        """H: (..., N, P*d) representations, G: (N, d_g) -> Z: (..., N, d_g)."""
        H = H if isinstance(H, Tensor) else Tensor(H)
        if H.shape[-1] != self.rep_width:
            raise ShapeError(f"node_embeddings: representation width {H.shape[-1]} != {self.rep_width}")
        return self.node_fc(H).relu() + G

    def pairwise_logits(self, Z):
        """Z: (..., N, d_g) -> Θ: (..., N, N, 2), row i from Z_i || Z_j."""
        *lead, N, dg = Z.shape
        zi = broadcast_to(reshape(Z, (*lead, N, 1, dg)), (*lead, N, N, dg))
        zj = broadcast_to(reshape(Z, (*lead, 1, N, dg)), (*lead, N, N, dg))
        return self.pair(concat([zi, zj], axis=-1))

    def theta(self, H, series):
        return self.pairwise_logits(self.node_embeddings(H, self.global_features(series)))


def edge_probabilities(theta):
    """Θ' = softmax(Θ)[..., 0]."""
    return softmax(theta, axis=-1)[..., 0]


# -- kNN target -------------------------------------------------------------------------
@dataclass
class KnnGraph:
    A: np.ndarray
    k: int
    source: str = "representations"


def cosine_similarity_rows(features):
    f = np.asarray(features, dtype=np.float64)
    norms = np.sqrt(np.sum(f * f, axis=1))
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise GraphError(f"node {int(zero[0])} has a zero-norm feature vector")
    unit = f / norms[:, None]
    # elementwise products then a row reduction: identical rows give identical scores
    return np.stack([np.sum(unit[i][None, :] * unit, axis=1) for i in range(len(unit))])


def knn_graph(features, k, source="representations"):
    """Row i marks the k rows most cosine-similar to i (excluding i); ties go to the lower index."""
    N = len(features)
    if not 1 <= k <= N - 1:
        raise GraphError(f"k={k} outside [1, {N - 1}] for {N} nodes")
    sim = cosine_similarity_rows(features)
    A = np.zeros((N, N))
    for i in range(N):
        others = np.array([j for j in range(N) if j != i])
        order = np.lexsort((others, -sim[i, others]))
        A[i, others[order[:k]]] = 1.0
    return KnnGraph(A, k, source)


def node_features_from_bank(bank, starts):
    """Per-node representations averaged over the given windows, flattened to P*d."""
    reps = bank.window(starts).astype(np.float64)  # (S, N, P, d)
    return reps.mean(axis=0).reshape(reps.shape[1], -1)


def node_features_from_series(values):
    """(T, N, C) training values -> (N, T*C)."""
    v = np.asarray(values, dtype=np.float64)
    return v.transpose(1, 0, 2).reshape(v.shape[1], -1)


def graph_regularization(theta_prime, A, eps=EPS):
    """Sum over ordered pairs of the binary cross-entropy between Θ' and A."""
    A = np.asarray(A, dtype=np.float64)
    if theta_prime.shape != A.shape:
        raise ShapeError(f"graph_regularization: {theta_prime.shape} vs {A.shape}")
    p = clip(theta_prime, eps, 1.0 - eps)
    return -((p.log() * A) + ((1.0 - p).log() * (1.0 - A))).sum()


# -- sampling -----------------------------------------------------------------------------
@dataclass
class SampledGraph:
    A: Tensor  # edge-class coordinate, values in [0, 1]
    tau: float


def gumbel_noise(rng, shape):
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_sample(rng, theta, tau, noise=None):
    """softmax((Θ + g) / τ) with g ~ Gumbel(0, 1); the noise is a constant on the tape."""
    if tau <= 0:
        raise GraphError(f"temperature must be positive, got {tau}")
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    g = gumbel_noise(rng, theta.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    return SampledGraph(softmax((theta + g) * (1.0 / tau), axis=-1)[..., 0], tau)


# -- export and scoring --------------------------------------------------------------------
def edge_list_csv(matrix, keep_zero=False):
    m = np.asarray(matrix, dtype=np.float64)
    buf = io.StringIO()
    buf.write("src,dst,weight\n")
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if keep_zero or m[i, j] != 0:
                buf.write(f"{i},{j},{float(m[i, j])!r}\n")
    return buf.getvalue()


def write_edge_list(path, matrix, keep_zero=False):
    atomic_write(path, edge_list_csv(matrix, keep_zero).encode("utf-8"))


def read_edge_list(path, N):
    A = np.zeros((N, N))
    with open(path) as fh:
        next(fh)
        for line in fh:
            s, d, w = line.strip().split(",")
            A[int(s), int(d)] = float(w)
    return A


def edge_f1(pred, truth):
    """F1 between off-diagonal edge sets of two binary matrices."""
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    off = ~np.eye(len(pred), dtype=bool)
    tp = np.sum(pred & truth & off)
    fp = np.sum(pred & ~truth & off)
    fn = np.sum(~pred & truth & off)
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def random_graph(rng, N, edges):
    """Uniformly random directed graph with ``edges`` off-diagonal ones."""
    off = np.flatnonzero(~np.eye(N, dtype=bool).ravel())
    A = np.zeros(N * N)
    A[rng.choice(off, size=edges, replace=False)] = 1.0
    return A.reshape(N, N)
