import glob
import json
import os

import numpy as np
import pytest

from stepgraph import config as rc
from stepgraph.cli import main
from stepgraph.data import load_dataset
from stepgraph.graph_learner import read_edge_list

TINY = {
    "seed": 3,
    "data": {"lookback": True, "synthetic": {"N": 4, "days": 14, "steps_per_day": 16}},
    "tsformer": {"L": 4, "P": 8, "d": 8, "enc_layers": 1, "dec_layers": 1, "heads": 2},
    "pretrain": {"epochs": 2, "stride": 4},
    "forecast": {"d_prime": 8, "T_f": 4,
                 "graph": {"k": 2, "d_g": 8, "hidden": 8, "kernel": 3, "conv_channels": [2, 4]}},
    "schedule": {"epochs": 2, "batch_size": 16, "warm_num": 1},
}


def run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    info = json.loads(out) if code == 0 else None
    return code, info, err


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_generate_default_loads_and_is_deterministic(tmp_path, capsys):
    code, a, _ = run(["generate", "--seed", 7, "--out", tmp_path / "a"], capsys)
    code2, b, _ = run(["generate", "--seed", 7, "--out", tmp_path / "b"], capsys)
    assert code == code2 == 0
    ds = load_dataset(a["dataset"])
    assert ds.values.shape == (28 * 48, 12, 1)
    assert open(a["dataset"], "rb").read() == open(b["dataset"], "rb").read()
    A = read_edge_list(os.path.join(a["run"], "planted_graph.csv"), 12)
    assert np.all(A.sum(axis=1) == 2)
    cfg = json.load(open(os.path.join(a["run"], "config.json")))
    assert cfg["command"] == "generate" and cfg["seed"] == 7
    assert os.path.basename(a["run"]).split("-")[0] == os.path.basename(b["run"]).split("-")[0]


def test_usage_errors(tmp_path, tiny, capsys):
    code, _, err = run(["evaluate", "--config", tiny, "--out", tmp_path], capsys)
    assert code == 2 and "--checkpoint" in err
    code, _, err = run(["train", "--config", tiny, "--out", tmp_path], capsys)
    assert code == 2 and "--pretrained" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tsformer": {"depth": 3}}))
    code, _, err = run(["pretrain", "--config", bad, "--out", tmp_path], capsys)
    assert code == 2 and "tsformer.depth" in err
    code, _, _ = run(["generate", "--N", "x"], capsys)
    assert code == 2
    code, _, err = run(["generate", "--N", 1, "--out", tmp_path], capsys)
    assert code == 1 and "invalid synthetic spec" in err
    assert os.listdir(tmp_path) == ["bad.json", "tiny.json"] or "runs" not in os.listdir(tmp_path)


def test_flags_override_file(tiny):
    cfg = rc.load(tiny, ["pretrain.epochs=9", "forecast.graph.source=raw-series"])
    assert cfg["pretrain"]["epochs"] == 9 and cfg["forecast"]["graph"]["source"] == "raw-series"
    assert cfg["tsformer"]["P"] == 8
    with pytest.raises(rc.RunConfigError):
        rc.load(tiny, ["nope=1"])


def _files(run_dir):
    out = {}
    for path in sorted(glob.glob(os.path.join(run_dir, "**", "*"), recursive=True)):
        if os.path.isfile(path):
            out[os.path.relpath(path, run_dir)] = open(path, "rb").read()
    return out


def test_pipeline_reproducible_from_archived_config(tmp_path, tiny, capsys):
    out = tmp_path / "runs"
    _, gen, _ = run(["generate", "--config", tiny, "--out", out], capsys)
    data = gen["dataset"]
    before = open(data, "rb").read()
    code, pre, _ = run(["pretrain", "--config", tiny, "--data", data, "--out", out], capsys)
    assert code == 0
    ck = os.path.join(pre["run"], "tsformer.stck")
    bank = os.path.join(pre["run"], "bank.strb")
    code, tr, _ = run(["train", "--config", tiny, "--data", data, "--pretrained", ck, "--bank", bank,
                       "--out", out], capsys)
    assert code == 0
    code, ev, _ = run(["evaluate", "--config", tiny, "--data", data, "--checkpoint",
                       os.path.join(tr["run"], "forecaster.stck"), "--out", out], capsys)
    assert code == 0
    report = open(os.path.join(ev["run"], "report.csv")).read().splitlines()
    assert report[0] == "horizon,mae,rmse,mape" and [r.split(",")[0] for r in report[1:]] == ["3", "mean"]
    code, ins, _ = run(["inspect", "--config", tiny, "--data", data, "--pretrained", ck, "--out", out], capsys)
    assert code == 0
    assert open(data, "rb").read() == before
    for first in (gen, pre, tr, ev, ins):
        snapshot = _files(first["run"])
        code, again, _ = run(["generate" if first is gen else
                              json.load(open(os.path.join(first["run"], "config.json")))["command"],
                              "--config", os.path.join(first["run"], "config.json"),
                              "--out", tmp_path / "again"], capsys)
        assert code == 0
        assert _files(again["run"]) == snapshot
        assert _files(first["run"]) == snapshot  # earlier run untouched


def test_sweep_rows(tmp_path, tiny, capsys):
    code, sw, _ = run(["sweep", "--config", tiny, "--axis", "r", "--values", "0.25,0.75",
                       "--out", tmp_path], capsys)
    assert code == 0
    lines = open(os.path.join(sw["run"], "sweep.csv")).read().splitlines()
    assert lines[0].startswith("r,val_mae") and len(lines) == 3


def test_backend_only_train_needs_no_pretrained(tmp_path, tiny, capsys):
    code, tr, _ = run(["train", "--config", tiny, "--no-fusion", "--no-gsl", "--source", "raw-series",
                       "--out", tmp_path], capsys)
    assert code == 0 and not os.path.exists(os.path.join(tr["run"], "learned_graph.csv"))
