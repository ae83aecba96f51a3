"""Command-line entry point: generate, pretrain, train, evaluate, inspect, sweep.

Every command resolves a RunConfig (defaults <- --config file <- flags),
creates ``<out>/<hash8>-<timestamp>/``, writes the resolved config there as
``config.json`` and then its outputs. Re-running with ``--config
<run>/config.json`` reproduces the outputs byte for byte.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, bad
config, missing prerequisite artifact).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict

import numpy as np

from . import config as rc
from .data import (
    DataError,
    NormStats,
    RawDataset,
    atomic_write,
    fit_apply_zscore,
    forecast_starts,
    generate_synthetic,
    load_csv,
    load_dataset,
    resolve_split,
    save_dataset,
)
from .forecaster import (
    evaluate,
    learned_edge_probabilities,
    load_forecast_checkpoint,
    save_forecast_checkpoint,
    train,
)
from .graph_learner import write_edge_list
from .inspection import (
    heatmap_svg,
    lag_profile,
    matrix_csv,
    patch_similarity,
    periodic_retrieval_rate,
    posemb_similarity,
    reconstruction_csv,
    reconstruction_dump,
    reconstruction_svg,
    top_k_similar,
)
from .store import StoreError, config_hash, load_bank, load_checkpoint, save_bank, save_checkpoint
from .tensor_core import ConfigError
from .tsformer import TSFormer, TSFormerConfig, precompute_representations, pretrain, tsformer_hashes

log = logging.getLogger("stepgraph")


class UsageError(Exception):
    pass


# -- plumbing ----------------------------------------------------------------------------------
def _dump_json(obj):
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _jsonl(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode("utf-8")


def make_run_dir(out, command, cfg):
    digest = config_hash({"command": command, "config": cfg})[:8]
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    base = os.path.join(out, f"{digest}-{stamp}")
    path, n = base, 1
    while os.path.exists(path):
        path, n = f"{base}-{n}", n + 1
    os.makedirs(path)
    atomic_write(os.path.join(path, "config.json"), _dump_json({"command": command, **cfg}))
    return path


def load_data(cfg):
    """Dataset from data.path, or the synthetic spec when no path is given."""
    path = cfg["data"]["path"]
    if path is None:
        ds, _ = generate_synthetic(cfg["seed"], **cfg["data"]["synthetic"])
        return ds
    if not os.path.exists(path):
        raise UsageError(f"dataset {path!r} not found (set --data)")
    return load_dataset(path)


def split_of(cfg, ds):
    return resolve_split(ds.T, tuple(cfg["data"]["split"]))


def normalise_with(ds, stats):
    normed = np.where(ds.missing, 0.0, stats.apply(ds.values))
    return RawDataset(normed, ds.steps_per_day, ds.name, ds.channel_names, ds.missing, stats)


def _stats_meta(stats):
    return {"mean": stats.mean.tolist(), "std": stats.std.tolist()}


def _stats_from(meta):
    return NormStats(np.asarray(meta["mean"]), np.asarray(meta["std"]))


def _require(path, flag, what):
    if path is None:
        raise UsageError(f"{what} required: pass {flag}")
    if not os.path.exists(path):
        raise UsageError(f"{what} {path!r} not found (check {flag})")
    return path


def load_pretrained(path):
    meta, params = load_checkpoint(path)
    if "tsformer_config" not in meta:
        raise UsageError(f"{path!r} is not a pre-training checkpoint (check --pretrained)")
    model = TSFormer(TSFormerConfig(**meta["tsformer_config"]), np.random.default_rng(0))
    model.load_state_dict(params)
    return model, meta


# -- commands ---------------------------------------------------------------------------------
def cmd_generate(cfg, run, args):
    if args.from_csv:
        ds = load_csv(_require(args.from_csv, "--from-csv", "CSV file"))
        A = None
    else:
        ds, A = generate_synthetic(cfg["seed"], **cfg["data"]["synthetic"])
    save_dataset(ds, os.path.join(run, "dataset.stsf"))
    if A is not None:
        write_edge_list(os.path.join(run, "planted_graph.csv"), A)
    return {"dataset": os.path.join(run, "dataset.stsf"), "T": ds.T, "N": ds.N, "C": ds.C}


def _pretrain(cfg, ds, split, tcfg, run):
    nds = fit_apply_zscore(ds, split)
    settings = rc.pretrain_settings(cfg)
    res = pretrain(tcfg, nds, split, settings, seed=cfg["seed"])
    meta = {"tsformer_config": asdict(tcfg),
            "norm_stats": _stats_meta(nds.norm_stats), "best_epoch": res.best_epoch,
            "history": res.history, **tsformer_hashes(res.model)}
    save_checkpoint(os.path.join(run, "tsformer.stck"), res.model.state_dict(), meta)
    atomic_write(os.path.join(run, "pretrain_log.jsonl"), _jsonl(res.history))
    T_f = cfg["forecast"]["T_f"]
    bank = precompute_representations(res.model, nds, split, T_f, cfg["data"]["lookback"])
    save_bank(os.path.join(run, "bank.strb"), bank)
    return res, nds


def cmd_pretrain(cfg, run, args):
    ds = load_data(cfg)
    split = split_of(cfg, ds)
    res, _ = _pretrain(cfg, ds, split, rc.tsformer_config(cfg), run)
    return {"best_epoch": res.best_epoch, "checkpoint": os.path.join(run, "tsformer.stck")}


def _needs_encoder(fcfg):
    g = fcfg.graph
    return fcfg.fusion or g.gsl or g.source == "representations"


def _train(cfg, ds, split, tsformer, bank, fcfg, run, prefix=""):
    nds = fit_apply_zscore(ds, split)
    schedule = rc.train_schedule(cfg)
    # window geometry follows the encoder when there is one
    tcfg = tsformer.config if tsformer is not None else rc.tsformer_config(cfg)
    result = train(fcfg, nds, split, tsformer, bank, schedule, seed=cfg["seed"], P=tcfg.P, L=tcfg.L)
    meta = {"norm_stats": _stats_meta(nds.norm_stats), "history": result.history,
            "lookback": cfg["data"]["lookback"], "split": list(cfg["data"]["split"])}
    save_forecast_checkpoint(os.path.join(run, prefix + "forecaster.stck"), result, fcfg, schedule, tsformer, meta)
    atomic_write(os.path.join(run, prefix + "train_log.jsonl"), _jsonl(result.history))
    write_edge_list(os.path.join(run, prefix + "knn_graph.csv"), result.knn)
    if result.model.learner is not None:
        theta = learned_edge_probabilities(result, nds, split, tsformer, bank, cfg["data"]["lookback"])
        write_edge_list(os.path.join(run, prefix + "learned_graph.csv"), theta, keep_zero=True)
    return result, nds


def _encoder_inputs(cfg, fcfg):
    if not _needs_encoder(fcfg):
        return None, None
    path = _require(cfg["inputs"]["pretrained"], "--pretrained", "pre-trained encoder checkpoint")
    tsformer, _ = load_pretrained(path)
    bank = None
    if cfg["inputs"]["bank"] is not None:
        bank = load_bank(_require(cfg["inputs"]["bank"], "--bank", "representation bank"),
                         expect=tsformer_hashes(tsformer))
    return tsformer, bank


def cmd_train(cfg, run, args):
    fcfg = rc.forecast_config(cfg)
    tsformer, bank = _encoder_inputs(cfg, fcfg)
    ds = load_data(cfg)
    split = split_of(cfg, ds)
    result, _ = _train(cfg, ds, split, tsformer, bank, fcfg, run)
    return {"best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae}


def cmd_evaluate(cfg, run, args):
    path = _require(cfg["inputs"]["checkpoint"], "--checkpoint", "forecaster checkpoint")
    try:
        run_obj, tsformer, meta = load_forecast_checkpoint(path)
    except (StoreError, KeyError) as exc:
        raise UsageError(f"{path!r} is not a forecaster checkpoint (check --checkpoint): {exc}") from None
    ds = load_data(cfg)
    nds = normalise_with(ds, _stats_from(meta["norm_stats"]))
    split = resolve_split(ds.T, tuple(meta["split"]))
    report = evaluate(run_obj, nds, split, cfg["inputs"]["split"], tsformer, None, meta["lookback"])
    atomic_write(os.path.join(run, "report.csv"), report.to_csv().encode("utf-8"))
    atomic_write(os.path.join(run, "report.json"), report.to_json().encode("utf-8"))
    return report.rows["mean"]


def _default_window(cfg, model, split):
    if cfg["inspect"]["window"] is not None:
        return int(cfg["inspect"]["window"])
    c = model.config
    starts = forecast_starts(split.test, c.P, c.L, cfg["forecast"]["T_f"], lookback=True)
    if len(starts) == 0:
        raise DataError("no window fits before the test split; set inspect.window")
    return int(starts[0])


def cmd_inspect(cfg, run, args):
    path = _require(cfg["inputs"]["pretrained"], "--pretrained", "pre-trained encoder checkpoint")
    model, meta = load_pretrained(path)
    ds = load_data(cfg)
    nds = normalise_with(ds, _stats_from(meta["norm_stats"]))
    split = split_of(cfg, ds)
    node, k = int(cfg["inspect"]["node"]), int(cfg["inspect"]["k"])
    start = _default_window(cfg, model, split)
    c = model.config
    if not 0 <= start <= ds.T - c.P * c.L:
        raise UsageError(f"window start {start} outside [0, {ds.T - c.P * c.L}] (check --window)")
    if not 0 <= node < ds.N:
        raise UsageError(f"node {node} outside [0, {ds.N - 1}] (check --node)")
    sim = patch_similarity(model, node, start, nds)
    pos = posemb_similarity(model)
    for name, m in (("patch_similarity", sim), ("posemb_similarity", pos)):
        atomic_write(os.path.join(run, name + ".csv"), matrix_csv(m.values).encode("utf-8"))
        atomic_write(os.path.join(run, name + ".svg"), heatmap_svg(m.values).encode("utf-8"))
    rows = ["patch," + ",".join(f"rank{i + 1}" for i in range(k))]
    for j in range(c.P):
        rows.append(f"{j}," + ",".join(str(int(i)) for i in top_k_similar(sim, j, k)))
    atomic_write(os.path.join(run, "top_k.csv"), ("\n".join(rows) + "\n").encode("utf-8"))
    rec = reconstruction_dump(model, nds, node, start, int(cfg["inspect"]["mask_seed"]))
    atomic_write(os.path.join(run, "reconstruction.csv"), reconstruction_csv(rec).encode("utf-8"))
    atomic_write(os.path.join(run, "reconstruction.svg"), reconstruction_svg(rec).encode("utf-8"))
    summary = {"node": node, "window": start, "masked_mae": rec.masked_mae()}
    day = ds.steps_per_day / c.L
    if day == int(day) and 0 < day < c.P:
        day = int(day)
        prof = lag_profile(sim.values, sorted({max(1, day // 2), day}))
        summary.update(day_lag_patches=day, lag_similarity={str(g): v for g, v in prof.items()},
                       periodic_top_k_rate=periodic_retrieval_rate(sim.values, day, k))
    atomic_write(os.path.join(run, "summary.json"), _dump_json(summary))
    return summary


def cmd_sweep(cfg, run, args):
    axis, values = cfg["sweep"]["axis"], cfg["sweep"]["values"]
    if not values:
        raise UsageError("sweep needs at least one value (set --values)")
    ds = load_data(cfg)
    split = split_of(cfg, ds)
    lines = [f"{axis},val_mae,test_mae,test_rmse,test_mape"]
    base_tsformer = None
    if axis == "k":
        fcfg0 = rc.forecast_config(cfg)
        base_tsformer, _ = _encoder_inputs(cfg, fcfg0)
    for i, v in enumerate(values):
        sub = os.path.join(run, f"{axis}={v}")
        os.makedirs(sub)
        if axis == "r":
            local = rc.set_path(cfg, f"tsformer.r={json.dumps(v)}")
            res, _ = _pretrain(local, ds, split, rc.tsformer_config(local), sub)
            tsformer = res.model
        else:
            local = rc.set_path(cfg, f"forecast.graph.k={json.dumps(v)}")
            tsformer = base_tsformer
        fcfg = rc.forecast_config(local)
        result, nds = _train(local, ds, split, tsformer, None, fcfg, sub)
        rep = evaluate(result, nds, split, "test", tsformer, None, cfg["data"]["lookback"]).rows["mean"]
        lines.append(",".join([str(v)] + [repr(float(x)) for x in
                                      (result.best_val_mae, rep["mae"], rep["rmse"], rep["mape"] * 100.0)]))
    atomic_write(os.path.join(run, "sweep.csv"), ("\n".join(lines) + "\n").encode("utf-8"))
    return {"rows": len(values)}


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
            "evaluate": cmd_evaluate, "inspect": cmd_inspect, "sweep": cmd_sweep}


# -- argument parsing -------------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--out", default="runs", help="parent directory for run directories")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set pretrain.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stepgraph", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic or imported STSF dataset")
    g.add_argument("--N", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--steps-per-day", type=int)
    g.add_argument("--k-planted", type=int)
    g.add_argument("--noise-sd", type=float)
    g.add_argument("--from-csv", help="convert a long-format CSV instead of generating")

    for name, helptext in (("pretrain", "masked-autoencoder pre-training"),
                           ("train", "forecasting-stage training"),
                           ("evaluate", "per-horizon metrics for a trained forecaster"),
                           ("inspect", "similarity, retrieval and reconstruction artifacts"),
                           ("sweep", "metric-versus-value table over r or k")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", help="STSF dataset (default: synthetic spec from the config)")
        s.add_argument("--lookback", action="store_true", default=None,
                       help="let windows reach back before their split's start")
        if name in ("pretrain", "sweep"):
            s.add_argument("--epochs", type=int, help="pre-training epochs")
        if name in ("train", "inspect", "sweep"):
            s.add_argument("--pretrained", help="pre-training checkpoint (tsformer.stck)")
        if name in ("train", "sweep"):
            s.add_argument("--train-epochs", type=int, help="forecasting epochs")
            s.add_argument("--backend", choices=["tcn", "gru"])
            s.add_argument("--k", type=int, help="neighbours in the kNN target graph")
            s.add_argument("--no-fusion", action="store_true", default=None)
            s.add_argument("--no-gsl", action="store_true", default=None)
            s.add_argument("--source", choices=["representations", "raw-series"])
        if name == "train":
            s.add_argument("--bank", help="representation bank (bank.strb) from the pre-training run")
        if name == "evaluate":
            s.add_argument("--checkpoint", help="forecaster checkpoint (forecaster.stck)")
            s.add_argument("--split", choices=["train", "val", "test"])
        if name == "inspect":
            s.add_argument("--node", type=int)
            s.add_argument("--window", type=int, help="window start index")
            s.add_argument("--mask-seed", type=int)
        if name == "sweep":
            s.add_argument("--axis", choices=["r", "k"])
            s.add_argument("--values", help="comma-separated values")
    return p


FLAG_KEYS = {
    "seed": "seed", "N": "data.synthetic.N", "days": "data.synthetic.days",
    "steps_per_day": "data.synthetic.steps_per_day", "k_planted": "data.synthetic.k_planted",
    "noise_sd": "data.synthetic.noise_sd", "data": "data.path", "lookback": "data.lookback",
    "epochs": "pretrain.epochs", "train_epochs": "schedule.epochs", "backend": "forecast.backend",
    "k": "forecast.graph.k", "source": "forecast.graph.source", "pretrained": "inputs.pretrained",
    "bank": "inputs.bank", "checkpoint": "inputs.checkpoint", "split": "inputs.split",
    "node": "inspect.node", "window": "inspect.window", "mask_seed": "inspect.mask_seed",
    "axis": "sweep.axis",
}


def resolve_config(args):
    cfg = rc.defaults()
    if args.config is not None:
        if not os.path.exists(args.config):
            raise UsageError(f"config file {args.config!r} not found (check --config)")
        with open(args.config) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
        raw.pop("command", None)  # run directories record which command wrote them
        cfg = rc.merge(cfg, raw)
    overrides = []
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if getattr(args, "no_fusion", None):
        overrides.append("forecast.fusion=false")
    if getattr(args, "no_gsl", None):
        overrides.append("forecast.graph.gsl=false")
    if getattr(args, "values", None):
        try:
            vals = [json.loads(v) for v in args.values.split(",")]
        except json.JSONDecodeError:
            raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
        overrides.append(f"sweep.values={json.dumps(vals)}")
    for item in overrides + list(args.set):
        cfg = rc.set_path(cfg, item)
    return rc.validate(cfg)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = resolve_config(args)
        run = make_run_dir(args.out, args.command, cfg)
        summary = COMMANDS[args.command](cfg, run, args)
        print(json.dumps({"run": run, **(summary or {})}, sort_keys=True, default=float))
        return 0
    except (UsageError, rc.RunConfigError, ConfigError) as exc:
        if run is not None:
            shutil.rmtree(run, ignore_errors=True)  # nothing was produced
        print(f"stepgraph {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"stepgraph {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
