"""RunConfig: the JSON document that fully describes a command invocation.

Schema (every section optional in a file; missing keys take defaults)::

    {
      "seed": 0,
      "data": {"path": null, "split": [0.7, 0.1, 0.2], "lookback": false,
               "synthetic": {"N": 12, "days": 28, "steps_per_day": 48, "k_planted": 2,
                             "noise_sd": 0.1, "coupling": 0.3, "weekend_factor": 0.6,
                             "level": 10.0, "phase_jitter": 0.1}},
      "tsformer": {"L": 12, "P": 168, "r": 0.75, "d": 96, "enc_layers": 4, "dec_layers": 1,
                   "heads": 4, "channels": 1},
      "pretrain": {"epochs": 100, "batch_size": 8, "base_lr": 0.0005, "betas": [0.9, 0.95],
                   "eps": 1e-08, "weight_decay": 0.0, "milestones": [50], "gamma": 0.5,
                   "clip": 5.0, "stride": null, "val_mask_seed": 12345},
      "forecast": {"backend": "tcn", "d_prime": 64, "T_f": 12, "fusion": true,
                   "graph": {"d_g": 32, "k": 10, "tau": 0.5, "anneal": false,
                             "source": "representations", "gsl": true,
                             "conv_channels": [8, 16], "kernel": 10, "stride": 1, "hidden": 64}},
      "schedule": {"epochs": 100, "batch_size": 32, "lr": 0.005, "weight_decay": 1e-05,
                   "milestones": [1, 18, 36, 54, 72], "gamma": 0.5, "clip": 5.0,
                   "cl_num": 3, "warm_num": 30, "warm_mode": "full"},
      "inputs": {"pretrained": null, "bank": null, "checkpoint": null, "split": "test"},
      "inspect": {"node": 0, "window": null, "mask_seed": 0, "k": 3},
      "sweep": {"axis": "r", "values": [0.25, 0.5, 0.75]}
    }

Unknown keys anywhere are rejected. ``data.lookback`` applies to both
training stages.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields

from .forecaster import ForecastConfig, TrainSchedule
from .graph_learner import GraphConfig
from .tsformer import PretrainSettings, TSFormerConfig


class RunConfigError(ValueError):
    pass


SYNTHETIC_DEFAULTS = {"N": 12, "days": 28, "steps_per_day": 48, "k_planted": 2, "noise_sd": 0.1,
                      "coupling": 0.3, "weekend_factor": 0.6, "level": 10.0, "phase_jitter": 0.1}


def _plain(obj):
    return json.loads(json.dumps(obj, default=list))


def defaults():
    pre = asdict(PretrainSettings())
    pre.pop("lookback")
    sched = asdict(TrainSchedule())
    sched.pop("lookback")
    fc = asdict(ForecastConfig())
    fc["graph"] = asdict(GraphConfig())
    return _plain({
        "seed": 0,
        "data": {"path": None, "split": [0.7, 0.1, 0.2], "lookback": False,
                 "synthetic": dict(SYNTHETIC_DEFAULTS)},
        "tsformer": asdict(TSFormerConfig()),
        "pretrain": pre,
        "forecast": fc,
        "schedule": sched,
        "inputs": {"pretrained": None, "bank": None, "checkpoint": None, "split": "test"},
        "inspect": {"node": 0, "window": None, "mask_seed": 0, "k": 3},
        "sweep": {"axis": "r", "values": [0.25, 0.5, 0.75]},
    })


def merge(base, override, path=""):
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise RunConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise RunConfigError(f"config key {where!r} must be an object")
            out[key] = merge(out[key], value, where)
        else:
            out[key] = value
    return out


def load(path=None, overrides=()):
    cfg = defaults()
    if path is not None:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise RunConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise RunConfigError(f"{path}: top level must be an object")
        cfg = merge(cfg, raw)
    for item in overrides:
        cfg = set_path(cfg, item)
    validate(cfg)
    return cfg


def set_path(cfg, assignment):
    """Apply ``a.b.c=JSON`` (bare strings allowed) to a config dict."""
    if "=" not in assignment:
        raise RunConfigError(f"override {assignment!r} must look like key.path=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested = value
    for part in reversed(key.split(".")):
        nested = {part: nested}
    return merge(cfg, nested)


def _build(cls, raw, **extra):
    names = {f.name for f in fields(cls)}
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items() if k in names}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{cls.__name__}: {exc}") from None


def tsformer_config(cfg):
    return _build(TSFormerConfig, cfg["tsformer"])


def pretrain_settings(cfg):
    return _build(PretrainSettings, cfg["pretrain"], lookback=cfg["data"]["lookback"])


def forecast_config(cfg):
    raw = dict(cfg["forecast"])
    graph = _build(GraphConfig, raw.pop("graph"))
    return _build(ForecastConfig, raw, graph=graph)


def train_schedule(cfg):
    return _build(TrainSchedule, cfg["schedule"], lookback=cfg["data"]["lookback"])


def validate(cfg):
    tsformer_config(cfg)
    pretrain_settings(cfg)
    forecast_config(cfg)
    train_schedule(cfg)
    split = cfg["data"]["split"]
    if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
        raise RunConfigError(f"data.split must be three non-negative fractions summing to 1, got {split}")
    if cfg["sweep"]["axis"] not in ("r", "k"):
        raise RunConfigError(f"sweep.axis must be 'r' or 'k', got {cfg['sweep']['axis']!r}")
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise RunConfigError(f"seed must be an unsigned 64-bit integer, got {cfg['seed']!r}")
    if cfg["inputs"]["split"] not in ("train", "val", "test"):
        raise RunConfigError(f"inputs.split must be train, val or test, got {cfg['inputs']['split']!r}")
    return cfg
