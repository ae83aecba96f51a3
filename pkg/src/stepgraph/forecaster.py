"""Forecasting stage: backend + fused frozen-encoder representations + graph learning.

Per step: the graph learner turns the batch's representations into edge
logits Θ (averaged over the batch), one Gumbel-softmax graph is drawn and
fed to the backend, the last patch's representation is projected and added
to the backend hidden state, and a regression head emits T_f steps. The
objective is MAE on the first h steps (curriculum) plus λ times the kNN
regulariser.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backends import make_backend
from .data import DataError, forecast_starts
from .graph_learner import (
    GraphConfig,
    GraphLearner,
    edge_probabilities,
    graph_regularization,
    gumbel_sample,
    knn_graph,
    node_features_from_series,
    tau_at,
)
from .metrics import horizon_report
from .store import load_checkpoint, params_hash, save_checkpoint
from .tensor_core import (
    ConfigError,
    LrSchedule,
    MLP,
    Module,
    Optimizer,
    ShapeError,
    Tensor,
    clip_gradients,
    lr_at,
    no_grad,
    reshape,
    softmax,
    transpose,
)
from .tsformer import TSFormer, TSFormerConfig, TrainingError, encode_windows, tsformer_hashes

log = logging.getLogger(__name__)

FORECAST_MILESTONES = (1, 18, 36, 54, 72)


@dataclass(frozen=True)
class ForecastConfig:
    backend: str = "tcn"
    d_prime: int = 64
    T_f: int = 12
    fusion: bool = True
    graph: GraphConfig = field(default_factory=GraphConfig)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.005
    weight_decay: float = 1.0e-5
    milestones: tuple = FORECAST_MILESTONES
    gamma: float = 0.5
    clip: float = 5.0
    cl_num: int = 3
    warm_num: int = 30
    warm_mode: str = "full"  # "full" or "one": horizon during warm-up
    lookback: bool = False

    def __post_init__(self):
        if self.cl_num < 1 or self.warm_num < 0:
            raise ConfigError("cl_num must be >= 1 and warm_num >= 0")
        if self.warm_mode not in ("full", "one"):
            raise ConfigError(f"warm_mode must be 'full' or 'one', got {self.warm_mode!r}")


def lambda_at(epoch):
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    return 1.0 / math.ceil(epoch / 6)


def curriculum_horizon(schedule, epoch, T_f=12):
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    if epoch <= schedule.warm_num:
        return T_f if schedule.warm_mode == "full" else 1
    return min(T_f, (epoch - schedule.warm_num - 1) // schedule.cl_num + 1)


def total_loss(regression, graph, lam):
    """regression + λ·graph; ``graph`` None means no graph term."""
    return regression if graph is None else regression + graph * lam


# -- model ---------------------------------------------------------------------------------
def fuse(sp, H_P, H_gw):
    """H_final = SP(H_P) + H_gw; ``sp`` None means no fusion."""
    if sp is None:
        return H_gw
    H_P = H_P if isinstance(H_P, Tensor) else Tensor(H_P)
    if H_P.shape[-1] != sp.fc1.in_features:
        raise ShapeError(f"fuse: representation width {H_P.shape[-1]} != {sp.fc1.in_features}")
    out = sp(H_P)
    if out.shape != H_gw.shape:
        raise ShapeError(f"fuse: projected {out.shape} vs backend hidden {H_gw.shape}")
    return out + H_gw


def predict(head, H_final, T_f, C):
    """(B, N, d') -> (B, T_f, N, C)."""
    B, N = H_final.shape[0], H_final.shape[1]
    y = reshape(head(H_final), (B, N, T_f, C))
    return transpose(y, (0, 2, 1, 3))


def regression_loss(pred, target, h, valid=None):
    """MAE over the first h horizon steps, all nodes and channels. pred: (B, T_f, N, C)."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"regression_loss: {pred.shape} vs {target.shape}")
    if not 1 <= h <= pred.shape[1]:
        raise ValueError(f"horizon {h} outside [1, {pred.shape[1]}]")
    err = (pred[:, :h] - target[:, :h]).abs()
    if valid is None:
        return err.mean()
    keep = np.asarray(valid, dtype=np.float64)[:, :h]
    if keep.sum() == 0:
        raise ValueError("regression_loss: no valid targets in the selected horizon")
    return (err * keep).sum() * (1.0 / keep.sum())


class Forecaster(Module):
    def __init__(self, config, L, C, d, rep_width, T_train, rng):
        self.config = config
        self.L, self.C = L, C
        self.backend = make_backend(config.backend, L, C, config.d_prime, rng)
        self.sp = MLP(d, config.d_prime, config.d_prime, rng) if config.fusion else None
        self.head = MLP(config.d_prime, config.d_prime, config.T_f * C, rng)
        self.learner = GraphLearner(config.graph, T_train, C, rep_width, rng) if config.graph.gsl else None
        self.T_train = T_train
        self.model_P = rep_width // d

    def forward(self, X, A, H_P=None):
        return predict(self.head, fuse(self.sp, H_P, self.backend(X, A)), self.config.T_f, self.C)


# -- data plumbing --------------------------------------------------------------------------
class Batcher:
    """Gathers last patches, targets and representations for window starts."""

    def __init__(self, ds, P, L, T_f, reps=None):
        self.ds, self.P, self.L, self.T_f = ds, P, L, T_f
        self.reps = reps  # callable: starts -> (S, N, P, d) float32, or None

    def inputs(self, starts):
        end = np.asarray(starts)[:, None] + self.P * self.L
        idx = end - self.L + np.arange(self.L)[None]
        return self.ds.values[idx].transpose(0, 2, 1, 3)  # (B, N, L, C)

    def targets(self, starts):
        idx = np.asarray(starts)[:, None] + self.P * self.L + np.arange(self.T_f)[None]
        y = self.ds.values[idx]
        valid = None if self.ds.missing is None else ~self.ds.missing[idx]
        return y, valid  # (B, T_f, N, C)


def _denorm(stats, x):
    if stats is None:
        return x
    return x * stats.std + stats.mean


@dataclass
class ForecastRun:
    model: Forecaster
    knn: np.ndarray
    static_graph: np.ndarray | None
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf


def _rep_source(tsformer, bank, ds):
    if tsformer is None:
        return None
    if bank is not None:
        bank.check(tsformer_hashes(tsformer))
        return bank.window
    cache = {}

    def encode(starts):
        missing = [int(s) for s in starts if int(s) not in cache]
        if missing:
            block = encode_windows(tsformer, ds, np.array(missing))
            cache.update(zip(missing, block))
        return np.stack([cache[int(s)] for s in starts])

    return encode


def _starts(split_range, P, L, T_f, lookback, name):
    try:
        s = forecast_starts(split_range, P, L, T_f, lookback)
    except DataError:
        s = np.array([], dtype=int)
    if name == "train" and len(s) == 0:
        raise TrainingError("no forecasting samples fit in the training split")
    return s


def knn_target(config, ds, split, reps, train_starts, P, L):
    """A^a over per-node features; representations are averaged over day-aligned windows."""
    g = config.graph
    if g.source == "representations":
        if reps is None:
            raise ConfigError("kNN over representations needs a pre-trained encoder")
        aligned = train_starts[(train_starts - train_starts[0]) % ds.steps_per_day == 0]
        feats = reps(aligned).astype(np.float64).mean(axis=0).reshape(ds.N, -1)
    else:
        lo, hi = split.train
        feats = node_features_from_series(ds.values[lo:hi])
    return knn_graph(feats, g.k, g.source).A


def _graph_for(model, reps_block, series, tau, rng, train):
    """Returns (adjacency, graph-loss-input Θ') for a batch."""
    B, N = reps_block.shape[0], reps_block.shape[1]
    theta = model.learner.theta(reps_block.reshape(B, N, -1), series)
    if train:
        mean_theta = theta.mean(axis=0)
        return gumbel_sample(rng, mean_theta, tau).A, edge_probabilities(mean_theta)
    # evaluation: per-sample noise-free tempered probabilities
    return softmax(theta * (1.0 / tau), axis=-1)[..., 0], None


def predict_starts(model, batcher, starts, series, knn, static_graph, tau, chunk=64):
    """De-normalised predictions and targets for all ``starts``."""
    preds, trues, valids = [], [], []
    with no_grad():
        for a in range(0, len(starts), chunk):
            s = starts[a:a + chunk]
            X = batcher.inputs(s)
            reps = batcher.reps(s) if batcher.reps is not None else None
            if model.learner is not None:
                A, _ = _graph_for(model, reps, series, tau, None, train=False)
            else:
                A = static_graph if static_graph is not None else knn
            H_P = None if reps is None else reps[:, :, -1, :].astype(np.float64)
            out = model(X, A, H_P).data
            y, valid = batcher.targets(s)
            preds.append(_denorm(batcher.ds.norm_stats, out))
            trues.append(_denorm(batcher.ds.norm_stats, y))
            if valid is not None:
                valids.append(valid)
    return np.concatenate(preds), np.concatenate(trues), (np.concatenate(valids) if valids else None)


def train(config, ds, split, tsformer=None, bank=None, schedule=None, seed=0, static_graph=None,
          on_epoch=None, P=None, L=None):
    """End-to-end forecasting-stage training; keeps the best validation-MAE parameters.

    ``ds`` must be z-scored (its ``norm_stats`` de-normalise predictions and
    targets before loss and metrics). The encoder is used read-only.
    """
    schedule = schedule or TrainSchedule()
    if config.fusion and tsformer is None:
        raise ConfigError("fusion needs a pre-trained encoder")
    if config.graph.gsl and tsformer is None:
        raise ConfigError("graph learning reads encoder representations; pass a pre-trained encoder")
    tcfg = tsformer.config if tsformer is not None else None
    P, L = (tcfg.P, tcfg.L) if tcfg else (P, L)
    if P is None or L is None:
        raise ConfigError("backend-only runs need explicit P and L")
    reps = _rep_source(tsformer, bank, ds)
    frozen_before = params_hash(tsformer.state_dict()) if tsformer is not None else None

    train_starts = _starts(split.train, P, L, config.T_f, schedule.lookback, "train")
    val_starts = _starts(split.val, P, L, config.T_f, schedule.lookback, "val")
    lo, hi = split.train
    series = ds.values[lo:hi].transpose(1, 0, 2)
    knn = knn_target(config, ds, split, reps, train_starts, P, L)
    batcher = Batcher(ds, P, L, config.T_f, reps)

    root = np.random.SeedSequence(seed)
    init_seq, shuffle_seq, gumbel_seq = root.spawn(3)
    d = tcfg.d if tcfg else 1
    model = Forecaster(config, L, ds.C, d, P * d, hi - lo, np.random.default_rng(init_seq))
    params = model.parameters()
    opt = Optimizer(params, schedule.lr, "adam", weight_decay=schedule.weight_decay)
    lr_schedule = LrSchedule(schedule.lr, schedule.milestones, schedule.gamma)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    gumbel_rng = np.random.default_rng(gumbel_seq)
    graph_fixed = static_graph if static_graph is not None else knn
    run = ForecastRun(model, knn, None if config.graph.gsl else graph_fixed)
    best_state = model.state_dict()
    stats = ds.norm_stats

    for epoch in range(1, schedule.epochs + 1):
        opt.lr = lr_at(lr_schedule, epoch - 1)
        lam = lambda_at(epoch)
        h = curriculum_horizon(schedule, epoch, config.T_f)
        tau = tau_at(config.graph, epoch, schedule.epochs)
        losses = []
        for b, s in enumerate(np.array_split(shuffle_rng.permutation(train_starts),
                                             max(1, math.ceil(len(train_starts) / schedule.batch_size)))):
            X = batcher.inputs(s)
            block = reps(s) if reps is not None else None
            H_P = None if block is None else block[:, :, -1, :].astype(np.float64)
            opt.zero_grad()
            if model.learner is not None:
                A, theta_prime = _graph_for(model, block, series, tau, gumbel_rng, train=True)
                graph_loss = graph_regularization(theta_prime, knn)
            else:
                A, graph_loss = graph_fixed, None
            y, valid = batcher.targets(s)
            pred = model(X, A, H_P)
            if stats is not None:
                pred = pred * stats.std + stats.mean
            loss = total_loss(regression_loss(pred, _denorm(stats, y), h, valid), graph_loss, lam)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward(params)
            clip_gradients(params, schedule.clip)
            opt.step()
            losses.append(loss.item())
        record = {"epoch": epoch, "lr": opt.lr, "lambda": lam, "horizon": h,
                  "train_loss": float(np.mean(losses))}
        if len(val_starts):
            pred, true, valid = predict_starts(model, batcher, val_starts, series, knn, run.static_graph, tau)
            rep = horizon_report(pred, true, valid).rows["mean"]
            record.update(val_mae=rep["mae"], val_rmse=rep["rmse"], val_mape=rep["mape"])
            score = rep["mae"]
        else:
            record.update(val_mae=None, val_rmse=None, val_mape=None)
            score = record["train_loss"]
        run.history.append(record)
        log.info("train epoch %d loss %.5f val_mae %s", epoch, record["train_loss"], record["val_mae"])
        if on_epoch is not None:
            on_epoch(record)
        if score < run.best_val_mae:
            run.best_val_mae, run.best_epoch, best_state = score, epoch, model.state_dict()

    model.load_state_dict(best_state)
    if tsformer is not None and params_hash(tsformer.state_dict()) != frozen_before:
        raise TrainingError("encoder parameters changed during forecasting")
    return run



# -- persistence and evaluation --------------------------------------------------------------
def save_forecast_checkpoint(path, run, config, schedule, tsformer=None, meta=None):
    """One file: forecaster params, frozen encoder params, kNN target and static graph."""
    params = {"forecaster." + k: v for k, v in run.model.state_dict().items()}
    if tsformer is not None:
        params.update({"tsformer." + k: v for k, v in tsformer.state_dict().items()})
    params["graph.knn"] = run.knn
    if run.static_graph is not None:
        params["graph.static"] = np.asarray(run.static_graph, dtype=np.float64)
    info = {
        "forecast_config": forecast_config_dict(config),
        "schedule": asdict(schedule),
        "tsformer_config": asdict(tsformer.config) if tsformer is not None else None,
        "window": {"P": run.model.model_P, "L": run.model.L},
        "T_train": run.model.T_train,
        "best_epoch": run.best_epoch,
        "best_val_mae": run.best_val_mae,
    }
    info.update(meta or {})
    save_checkpoint(path, params, info)


def forecast_config_dict(config):
    out = asdict(config)
    out["graph"] = asdict(config.graph)
    return out


def forecast_config_from_dict(raw):
    raw = dict(raw)
    g = dict(raw.pop("graph", {}))
    if "conv_channels" in g:
        g["conv_channels"] = tuple(g["conv_channels"])
    return ForecastConfig(graph=GraphConfig(**g), **raw)


def load_forecast_checkpoint(path):
    meta, params = load_checkpoint(path)
    config = forecast_config_from_dict(meta["forecast_config"])
    tsformer = None
    if meta.get("tsformer_config"):
        tcfg = TSFormerConfig(**meta["tsformer_config"])
        tsformer = TSFormer(tcfg, np.random.default_rng(0))
        tsformer.load_state_dict({k[len("tsformer."):]: v for k, v in params.items() if k.startswith("tsformer.")})
    P, L = meta["window"]["P"], meta["window"]["L"]
    d = tsformer.config.d if tsformer is not None else 1
    C = params["forecaster.head.fc2.weight"].shape[0] // config.T_f
    model = Forecaster(config, L, C, d, P * d, meta["T_train"], np.random.default_rng(0))
    model.load_state_dict({k[len("forecaster."):]: v for k, v in params.items() if k.startswith("forecaster.")})
    run = ForecastRun(model, params["graph.knn"], params.get("graph.static"))
    run.best_epoch, run.best_val_mae = meta["best_epoch"], meta["best_val_mae"]
    return run, tsformer, meta


def evaluate(run, ds, split, name="test", tsformer=None, bank=None, lookback=False):
    """Per-horizon MAE / RMSE / MAPE on de-normalised values for one split."""
    model = run.model
    P, L, T_f = model.model_P, model.L, model.config.T_f
    starts = _starts(split[name], P, L, T_f, lookback, name)
    if len(starts) == 0:
        raise DataError(f"no forecasting samples fit in the {name} split")
    batcher = Batcher(ds, P, L, T_f, _rep_source(tsformer, bank, ds))
    lo, hi = split.train
    series = ds.values[lo:hi].transpose(1, 0, 2)
    tau = tau_at(model.config.graph, 1, 1) if not model.config.graph.anneal else 0.1
    pred, true, valid = predict_starts(model, batcher, starts, series, run.knn, run.static_graph, tau)
    return horizon_report(pred, true, valid)


def learned_edge_probabilities(run, ds, split, tsformer=None, bank=None, lookback=False):
    """Θ' averaged over all training windows: the learned dependency graph."""
    model = run.model
    if model.learner is None:
        raise ConfigError("this run has no graph learner")
    P, L = model.model_P, model.L
    starts = _starts(split.train, P, L, model.config.T_f, lookback, "train")
    reps = _rep_source(tsformer, bank, ds)
    lo, hi = split.train
    series = ds.values[lo:hi].transpose(1, 0, 2)
    total = np.zeros((ds.N, ds.N))
    with no_grad():
        for a in range(0, len(starts), 64):
            block = reps(starts[a:a + 64])
            theta = model.learner.theta(block.reshape(block.shape[0], ds.N, -1), series)
            total += edge_probabilities(theta).data.sum(axis=0)
    return total / len(starts)
