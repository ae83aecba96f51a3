"""Masked-autoencoding Transformer over patched time series.

The encoder embeds every patch, adds a learnable positional embedding and
runs Transformer blocks on the unmasked patches only. The decoder places a
shared learnable mask token (plus the slot's positional embedding) at each
masked slot, runs one block over the full sequence and maps every row
back to a patch. Training minimises MAE on masked patches only.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import forecast_starts, patchify, window_starts
from .store import RepresentationBank, config_hash, params_hash
from .tensor_core import (
    ConfigError,
    LayerNorm,
    LrSchedule,
    MLP,
    Linear,
    Module,
    Optimizer,
    ShapeError,
    Tensor,
    TransformerBlock,
    broadcast_to,
    clip_gradients,
    concat,
    lr_at,
    no_grad,
    parameter,
    take_along_axis,
    truncated_normal,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TSFormerConfig:
    L: int = 12
    P: int = 168
    r: float = 0.75
    d: int = 96
    enc_layers: int = 4
    dec_layers: int = 1
    heads: int = 4
    channels: int = 1

    def __post_init__(self):
        if not 0 < self.r < 1:
            raise ConfigError(f"masking ratio must lie in (0, 1), got {self.r}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("encoder and decoder need at least one block each")
        if self.L < 1 or self.P < 2 or self.channels < 1:
            raise ConfigError("L, channels >= 1 and P >= 2 required")

    @property
    def patch_width(self):
        return self.L * self.channels


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray  # sorted 0-based patch indices
    unmasked: np.ndarray

    @property
    def P(self):
        return len(self.masked) + len(self.unmasked)


def mask_count(P, r):
    """round(r*P) with halves rounded up."""
    return int(math.floor(r * P + 0.5 + 1e-9))


def sample_mask(rng, P, r):
    n = mask_count(P, r)
    if n <= 0 or n >= P:
        raise ConfigError(f"masking ratio {r} leaves a degenerate mask for P={P} ({n} masked)")
    masked = np.sort(rng.choice(P, size=n, replace=False))
    unmasked = np.setdiff1d(np.arange(P), masked)
    return MaskSpec(masked, unmasked)


def stack_masks(masks):
    """Per-window masks -> (B, M) masked and (B, P-M) unmasked index arrays."""
    return np.stack([m.masked for m in masks]), np.stack([m.unmasked for m in masks])


def _as_index(mask):
    if isinstance(mask, MaskSpec):
        return mask.masked[None], mask.unmasked[None]
    if isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskSpec):
        return stack_masks(mask)
    masked, unmasked = mask
    return np.atleast_2d(masked), np.atleast_2d(unmasked)


class TSFormer(Module):
    def __init__(self, config, rng):
        self.config = config
        d = config.d
        self.embed = Linear(config.patch_width, d, rng)
        self.pos = parameter(rng.uniform(-0.02, 0.02, size=(config.P, d)))
        self.mask_token = parameter(truncated_normal(rng, (d,), std=0.02))
        self.encoder = [TransformerBlock(d, config.heads, rng) for _ in range(config.enc_layers)]
        self.enc_norm = LayerNorm(d)
        self.decoder = [TransformerBlock(d, config.heads, rng) for _ in range(config.dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.head = MLP(d, d, config.patch_width, rng)
        self.last_encoder_len = None

    # single windows are (P, LC); batches are (B, P, LC)
    def embed_patches(self, patches):
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        if patches.shape[-1] != self.config.patch_width:
            raise ShapeError(f"patch width {patches.shape[-1]} != L*C = {self.config.patch_width}")
        return self.embed(patches)

    def encode(self, U, mask):
        """Encoder over unmasked rows only; returns (..., K, d) in patch order."""
        single = U.ndim == 2
        if single:
            U = U.reshape(1, *U.shape)
        _, unmasked = _as_index(mask)
        if unmasked.shape[-1] == 0:
            raise ShapeError("encode: no unmasked patches")
        x = take_along_axis(U + self.pos, unmasked, axis=1)
        self.last_encoder_len = x.shape[1]
        for block in self.encoder:
            x = block(x)
        x = self.enc_norm(x)
        return x.reshape(x.shape[1:]) if single else x

    def decode(self, H, mask):
        """Reassemble the full sequence with mask tokens and reconstruct every patch."""
        single = H.ndim == 2
        if single:
            H = H.reshape(1, *H.shape)
        masked, unmasked = _as_index(mask)
        B, P, d = H.shape[0], self.config.P, self.config.d
        if masked.shape[-1] + unmasked.shape[-1] != P:
            raise ShapeError(f"decode: assembled length {masked.shape[-1] + unmasked.shape[-1]} != P={P}")
        masked = np.broadcast_to(masked, (B, masked.shape[-1]))
        unmasked = np.broadcast_to(unmasked, (B, unmasked.shape[-1]))
        tokens = broadcast_to(self.mask_token + self.pos, (B, P, d))
        filler = take_along_axis(tokens, masked, axis=1)
        restore = np.argsort(np.concatenate([unmasked, masked], axis=1), axis=1, kind="stable")
        x = take_along_axis(concat([H, filler], axis=1), restore, axis=1)
        for block in self.decoder:
            x = block(x)
        out = self.head(self.dec_norm(x))
        return out.reshape(out.shape[1:]) if single else out

    def forward(self, patches, mask):
        return self.decode(self.encode(self.embed_patches(patches), mask), mask)

    def encode_full(self, patches):
        """Mask-free encoding of all P patches: (..., P, d)."""
        x = self.embed_patches(patches) + self.pos
        self.last_encoder_len = x.shape[-2]
        for block in self.encoder:
            x = block(x)
        return self.enc_norm(x)

    def encoder_state(self):
        keep = ("embed.", "pos", "mask_token", "encoder.", "enc_norm.")
        return {k: v for k, v in self.state_dict().items() if k.startswith(keep)}


def reconstruction_loss(recon, target, mask, valid=None):
    """Mean absolute error over masked patches only.

    ``recon`` is a Tensor (..., P, LC); ``target`` an array of the same
    shape; ``valid`` an optional boolean array excluding missing entries.
    """
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction_loss: shapes {recon.shape} and {target.shape} differ")
    single = recon.ndim == 2
    if single:
        recon = recon.reshape(1, *recon.shape)
        target = target[None]
        valid = None if valid is None else np.asarray(valid)[None]
    masked, _ = _as_index(mask)
    if masked.shape[-1] == 0:
        raise ShapeError("reconstruction_loss: empty mask")
    masked = np.broadcast_to(masked, (recon.shape[0], masked.shape[-1]))
    picked = take_along_axis(recon, masked, axis=1)
    truth = np.take_along_axis(target, masked[..., None], axis=1)
    err = (picked - truth).abs()
    if valid is None:
        return err.mean()
    keep = np.take_along_axis(np.asarray(valid, dtype=np.float64), masked[..., None], axis=1)
    if keep.sum() == 0:
        raise ShapeError("reconstruction_loss: every masked entry is missing")
    return (err * keep).sum() * (1.0 / keep.sum())


# -- pre-training ------------------------------------------------------------------
@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 100
    batch_size: int = 8  # window starts per batch; each start contributes all N nodes
    base_lr: float = 5.0e-4
    betas: tuple = (0.9, 0.95)
    eps: float = 1.0e-8
    weight_decay: float = 0.0
    milestones: tuple = (50,)
    gamma: float = 0.5
    clip: float = 5.0
    stride: int | None = None  # defaults to L
    lookback: bool = False
    val_mask_seed: int = 12345

    @property
    def lr(self):
        # linear scaling rule
        return self.base_lr * self.batch_size / 8.0


@dataclass
class PretrainResult:
    model: TSFormer
    history: list = field(default_factory=list)
    best_epoch: int = 0


def _window_block(ds, starts, cfg):
    return patchify(ds.values, starts, cfg.P, cfg.L)  # (S, N, P, LC)


def _masks_for(rng, count, cfg):
    return stack_masks([sample_mask(rng, cfg.P, cfg.r) for _ in range(count)])


def evaluate_reconstruction(model, ds, starts, seed):
    """Mean masked MAE over windows at ``starts`` with a fixed mask stream."""
    cfg = model.config
    if len(starts) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with no_grad():
        for chunk in np.array_split(np.asarray(starts), max(1, len(starts) // 8)):
            x = _window_block(ds, chunk, cfg).reshape(-1, cfg.P, cfg.patch_width)
            masks = _masks_for(rng, x.shape[0], cfg)
            loss = reconstruction_loss(model(x, masks), x, masks)
            total += loss.item() * x.shape[0]
            count += x.shape[0]
    return total / count


def pretrain(config, ds, split, settings=None, seed=0, model=None, on_epoch=None):
    """Train a TSFormer with masked reconstruction; keep the best-validation parameters."""
    settings = settings or PretrainSettings()
    root = np.random.SeedSequence(seed)
    init_seq, shuffle_seq, mask_seq = root.spawn(3)
    model = model or TSFormer(config, np.random.default_rng(init_seq))
    if settings.epochs == 0:
        return PretrainResult(model)

    span = config.P * config.L
    stride = settings.stride or config.L
    train_starts = window_starts(split.train, span, stride, settings.lookback)
    try:
        val_starts = window_starts(split.val, span, stride, settings.lookback)
    except ValueError:
        val_starts = np.array([], dtype=int)
    if len(train_starts) == 0:
        raise TrainingError("no pre-training windows fit in the training split")

    params = model.parameters()
    opt = Optimizer(params, settings.lr, "adamw", settings.betas, settings.eps, settings.weight_decay)
    schedule = LrSchedule(settings.lr, settings.milestones, settings.gamma)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    mask_rng = np.random.default_rng(mask_seq)
    result = PretrainResult(model)
    best, best_state = math.inf, None

    for epoch in range(1, settings.epochs + 1):
        opt.lr = lr_at(schedule, epoch - 1)
        order = shuffle_rng.permutation(train_starts)
        losses = []
        for b in range(0, len(order), settings.batch_size):
            x = _window_block(ds, order[b:b + settings.batch_size], config)
            x = x.reshape(-1, config.P, config.patch_width)
            masks = _masks_for(mask_rng, x.shape[0], config)
            opt.zero_grad()
            loss = reconstruction_loss(model(x, masks), x, masks)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b // settings.batch_size}")
            loss.backward(params)
            clip_gradients(params, settings.clip)
            opt.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = evaluate_reconstruction(model, ds, val_starts, settings.val_mask_seed)
        record = {"epoch": epoch, "lr": opt.lr, "train_loss": train_loss,
                  "val_loss": val_loss if np.isfinite(val_loss) else None}
        result.history.append(record)
        log.info("pretrain epoch %d train %.5f val %s", epoch, train_loss, record["val_loss"])
        if on_epoch is not None:
            on_epoch(record)
        score = val_loss if np.isfinite(val_loss) else train_loss
        if score < best:
            best, best_state, result.best_epoch = score, model.state_dict(), epoch
    model.load_state_dict(best_state)
    return result


# -- representation cache --------------------------------------------------------------
def tsformer_hashes(model):
    return {"config_hash": config_hash(asdict(model.config)), "checkpoint_hash": params_hash(model.state_dict())}


def encode_windows(model, ds, starts, chunk=16):
    """float32 (S, N, P, d) encoder outputs for windows at ``starts``."""
    cfg = model.config
    out = np.zeros((len(starts), ds.N, cfg.P, cfg.d), dtype=np.float32)
    with no_grad():
        for a in range(0, len(starts), chunk):
            x = _window_block(ds, starts[a:a + chunk], cfg)
            out[a:a + chunk] = model.encode_full(x).data.astype(np.float32)
    return out


def precompute_representations(model, ds, split, T_f=12, lookback=False, splits=("train", "val", "test")):
    """Encode every forecasting window of the requested splits once."""
    cfg = model.config
    starts = []
    for name in splits:
        try:
            starts.append(forecast_starts(split[name], cfg.P, cfg.L, T_f, lookback))
        except ValueError:
            continue
    starts = np.unique(np.concatenate(starts)) if starts else np.array([], dtype=int)
    return RepresentationBank(starts, encode_windows(model, ds, starts), tsformer_hashes(model))


def copy_model(model):
    return copy.deepcopy(model)
