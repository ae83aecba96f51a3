import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stepgraph.backends import GatedTCN, GraphGRU, normalized_adjacency
from stepgraph.data import fit_apply_zscore, generate_synthetic, inverse_zscore, resolve_split
from stepgraph.forecaster import (
    ForecastConfig,
    Forecaster,
    TrainSchedule,
    curriculum_horizon,
    evaluate,
    fuse,
    lambda_at,
    load_forecast_checkpoint,
    predict,
    regression_loss,
    save_forecast_checkpoint,
    total_loss,
    train,
)
from stepgraph.graph_learner import GraphConfig, edge_probabilities, graph_regularization, gumbel_sample
from stepgraph.store import params_hash
from stepgraph.tensor_core import MLP, Tensor, check_gradients, no_grad
from stepgraph.tsformer import TSFormer, TSFormerConfig, precompute_representations

TS = TSFormerConfig(L=4, P=8, r=0.5, d=8, enc_layers=1, dec_layers=1, heads=2)
GRAPH = GraphConfig(k=1, d_g=4, hidden=6, kernel=3, conv_channels=(2, 3))
FC = ForecastConfig(d_prime=6, T_f=4, graph=GRAPH)
SCHED = TrainSchedule(epochs=2, batch_size=16, warm_num=1, lookback=True)


@pytest.fixture(scope="module")
def setup():
    ds, A = generate_synthetic(5, N=4, days=14, steps_per_day=16, k_planted=1)
    split = resolve_split(ds.T)
    nds = fit_apply_zscore(ds, split)
    ts = TSFormer(TS, np.random.default_rng(0))
    return nds, split, ts


# -- backends -----------------------------------------------------------------------------------
@pytest.mark.parametrize("cls", [GatedTCN, GraphGRU])
def test_backend_identity_graph_and_shape(cls):
    b = cls(4, 1, 6, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 1))
    x[:, 1] = x[:, 0]
    with no_grad():
        out = b(x, np.zeros((3, 3))).data
    assert out.shape == (2, 3, 6)
    assert np.array_equal(out[:, 0], out[:, 1])


@pytest.mark.parametrize("cls", [GatedTCN, GraphGRU])
def test_backend_locality(cls):
    b = cls(4, 1, 6, np.random.default_rng(0))
    x = np.random.default_rng(2).normal(size=(1, 3, 4, 1))
    y = x.copy()
    y[0, 0] += 5.0
    with no_grad():
        a, c = b(x, np.zeros((3, 3))).data, b(y, np.zeros((3, 3))).data
        ring = np.array([[0, 1.0, 0], [0, 0, 0], [0, 0, 0]])  # node 0 reads node 1
        d, e = b(x, ring).data, b(np.where(np.arange(3)[None, :, None, None] == 1, x + 5, x), ring).data
    assert np.array_equal(a[0, 1:], c[0, 1:]) and not np.allclose(a[0, 0], c[0, 0])
    assert not np.allclose(d[0, 0], e[0, 0])


@pytest.mark.parametrize("cls", [GatedTCN, GraphGRU])
def test_backend_gradients(cls):
    rng = np.random.default_rng(3)
    b = cls(4, 1, 3, rng)
    x = rng.normal(size=(2, 3, 4, 1))
    A = Tensor(rng.random((3, 3)), requires_grad=True)
    w = rng.normal(size=(2, 3, 3))

    def fn():
        return (b(x, A) * w).sum()

    assert check_gradients(fn, b.parameters() + [A]) < 1e-4


def test_normalized_adjacency_rows():
    a = normalized_adjacency(np.random.default_rng(0).random((4, 4))).data
    assert np.allclose(a.sum(axis=1), 1.0)


# -- fusion / prediction / loss ---------------------------------------------------------------------
def test_fuse_examples():
    rng = np.random.default_rng(4)
    sp = MLP(5, 3, 3, rng)
    H_P, H_gw = rng.normal(size=(2, 4, 5)), Tensor(rng.normal(size=(2, 4, 3)))
    out = fuse(sp, H_P, H_gw).data
    W1, b1, W2, b2 = sp.fc1.weight.data, sp.fc1.bias.data, sp.fc2.weight.data, sp.fc2.bias.data
    ref = np.maximum(H_P @ W1.T + b1, 0) @ W2.T + b2 + H_gw.data
    assert np.max(np.abs(out - ref)) < 1e-12
    assert np.array_equal(fuse(sp, H_P, Tensor(np.zeros((2, 4, 3)))).data, sp(Tensor(H_P)).data)
    for p in sp.parameters():
        p.data[:] = 0
    assert np.array_equal(fuse(sp, H_P, H_gw).data, H_gw.data)
    with pytest.raises(ValueError):
        fuse(sp, rng.normal(size=(2, 4, 6)), H_gw)


def test_predict_shape_and_zero_head():
    rng = np.random.default_rng(5)
    head = MLP(3, 3, 4 * 2, rng)
    H = Tensor(rng.normal(size=(2, 5, 3)))
    assert predict(head, H, 4, 2).shape == (2, 4, 5, 2)
    head.fc2.weight.data[:] = 0
    y = predict(head, H, 4, 2).data
    assert np.array_equal(y, np.broadcast_to(head.fc2.bias.data.reshape(4, 2)[None, :, None, :], y.shape))


def test_regression_loss_examples_and_oracle():
    Y = np.zeros((1, 2, 1, 1))
    assert regression_loss(Tensor(Y), Y, 2).item() == 0.0
    assert regression_loss(Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1)), Y, 2).item() == 2.0
    assert regression_loss(Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1)), Y, 1).item() == 1.0
    with pytest.raises(ValueError):
        regression_loss(Tensor(Y), Y, 3)
    rng = np.random.default_rng(6)
    p, y = rng.normal(size=(3, 5, 4, 2)), rng.normal(size=(3, 5, 4, 2))
    total = sum(abs(p[b, t, n, c] - y[b, t, n, c]) for b in range(3) for t in range(5)
                for n in range(4) for c in range(2))
    assert abs(regression_loss(Tensor(p), y, 5).item() - total / (3 * 5 * 4 * 2)) < 1e-12


def test_denormalisation_matches_data_module(setup):
    nds, split, _ = setup
    vals = nds.values[:10]
    assert np.allclose(inverse_zscore(vals, nds.norm_stats), vals * nds.norm_stats.std + nds.norm_stats.mean)


# -- schedules ----------------------------------------------------------------------------------------
def test_lambda_values():
    assert [lambda_at(e) for e in (1, 6, 7, 13)] == [1.0, 1.0, 0.5, 1 / 3]
    with pytest.raises(ValueError):
        lambda_at(0)


def test_curriculum_values():
    s = TrainSchedule()
    assert [curriculum_horizon(s, e) for e in (30, 31, 34, 64, 200)] == [12, 1, 2, 12, 12]
    assert curriculum_horizon(TrainSchedule(warm_mode="one"), 5) == 1


@given(st.integers(0, 40), st.integers(1, 6), st.integers(1, 24))
def test_curriculum_monotone_after_warmup(warm, cl, T_f):
    s = TrainSchedule(warm_num=warm, cl_num=cl)
    hs = [curriculum_horizon(s, e, T_f) for e in range(warm + 1, warm + 200)]
    assert all(a <= b for a, b in zip(hs, hs[1:])) and hs[-1] == T_f and 1 <= min(hs)


# -- training ------------------------------------------------------------------------------------------
def test_loss_composition_affine_in_lambda(setup):
    nds, split, ts = setup
    bank = precompute_representations(ts, nds, split, T_f=4, lookback=True)
    model = Forecaster(FC, 4, 1, 8, 64, split.train[1], np.random.default_rng(0))
    starts = bank.starts[:5]
    reps = bank.window(starts)
    theta = model.learner.theta(reps.reshape(5, 4, -1), nds.values[: split.train[1]].transpose(1, 0, 2))
    theta_prime = theta.softmax(axis=-1)[..., 0].mean(axis=0)
    g = graph_regularization(theta_prime, np.eye(4)[::-1])
    reg = regression_loss(Tensor(np.ones((1, 4, 4, 1))), np.zeros((1, 4, 4, 1)), 4)
    assert total_loss(reg, g, 0.0).item() == reg.item()
    t1, t2 = total_loss(reg, g, 0.5).item(), total_loss(reg, g, 1.0).item()
    assert abs((t2 - t1) - 0.5 * g.item()) < 1e-12 and abs(t1 - reg.item() - 0.5 * g.item()) < 1e-12


def test_training_deterministic_and_frozen_encoder(setup, tmp_path):
    nds, split, ts = setup
    before = params_hash(ts.state_dict())
    a = train(FC, nds, split, ts, schedule=SCHED, seed=4)
    b = train(FC, nds, split, ts, schedule=SCHED, seed=4)
    assert params_hash(ts.state_dict()) == before
    save_forecast_checkpoint(tmp_path / "a.stck", a, FC, SCHED, ts)
    save_forecast_checkpoint(tmp_path / "b.stck", b, FC, SCHED, ts)
    assert (tmp_path / "a.stck").read_bytes() == (tmp_path / "b.stck").read_bytes()
    assert [set(r) for r in a.history][0] == {"epoch", "lr", "lambda", "horizon", "train_loss",
                                              "val_mae", "val_rmse", "val_mape"}


def test_bank_and_inline_training_agree(setup):
    nds, split, ts = setup
    bank = precompute_representations(ts, nds, split, T_f=4, lookback=True)
    a = train(FC, nds, split, ts, bank=bank, schedule=SCHED, seed=1)
    b = train(FC, nds, split, ts, schedule=SCHED, seed=1)
    assert a.history == b.history


def test_stale_bank_rejected(setup):
    nds, split, ts = setup
    bank = precompute_representations(ts, nds, split, T_f=4, lookback=True)
    other = TSFormer(TS, np.random.default_rng(9))
    with pytest.raises(ValueError, match="stale"):
        train(FC, nds, split, other, bank=bank, schedule=SCHED, seed=1)


def test_gradients_reach_head_and_backend_not_encoder(setup):
    nds, split, ts = setup
    bank = precompute_representations(ts, nds, split, T_f=4, lookback=True)
    model = Forecaster(FC, 4, 1, 8, 64, split.train[1], np.random.default_rng(0))
    s = bank.starts[:3]
    X = nds.values[(s[:, None] + 28 + np.arange(4))].transpose(0, 2, 1, 3)
    loss = model(X, np.eye(4), bank.window(s)[:, :, -1].astype(float)).abs().mean()
    loss.backward(model.parameters())
    assert np.any(model.sp.fc1.weight.grad != 0) and np.any(model.backend.inp.weight.grad != 0)
    assert all(p.grad is None for p in ts.parameters())


def test_end_to_end_pairwise_head_gradients(setup):
    nds, split, ts = setup
    bank = precompute_representations(ts, nds, split, T_f=4, lookback=True)
    model = Forecaster(FC, 4, 1, 8, 64, split.train[1], np.random.default_rng(0))
    s = bank.starts[:2]
    reps = bank.window(s)
    X = nds.values[(s[:, None] + 28 + np.arange(4))].transpose(0, 2, 1, 3)
    Y = nds.values[(s[:, None] + 32 + np.arange(4))]
    series = nds.values[: split.train[1]].transpose(1, 0, 2)
    noise = -np.log(-np.log(np.random.default_rng(1).uniform(0.1, 0.9, size=(4, 4, 2))))
    target = np.eye(4)[[1, 2, 3, 0]]

    def fn():
        theta = model.learner.theta(reps.reshape(2, 4, -1), series).mean(axis=0)
        A = gumbel_sample(None, theta, 0.5, noise=noise).A
        pred = model(X, A, reps[:, :, -1].astype(float))
        return regression_loss(pred, Y, 4) + graph_regularization(edge_probabilities(theta), target) * 0.5

    assert check_gradients(fn, model.learner.pair.parameters()) < 1e-4


def test_backend_only_needs_no_encoder(setup):
    nds, split, _ = setup
    cfg = ForecastConfig(d_prime=6, T_f=4, fusion=False, graph=GraphConfig(k=1, gsl=False, source="raw-series"))
    run = train(cfg, nds, split, None, schedule=SCHED, seed=0, P=8, L=4)
    assert run.model.sp is None and run.model.learner is None
    assert run.static_graph.sum() == 4
    with pytest.raises(ValueError):
        train(cfg, nds, split, None, schedule=SCHED, seed=0)


def test_checkpoint_round_trip_and_evaluate(setup, tmp_path):
    nds, split, ts = setup
    run = train(FC, nds, split, ts, schedule=SCHED, seed=2)
    save_forecast_checkpoint(tmp_path / "f.stck", run, FC, SCHED, ts)
    back, ts2, meta = load_forecast_checkpoint(tmp_path / "f.stck")
    assert params_hash(ts2.state_dict()) == params_hash(ts.state_dict())
    r1 = evaluate(run, nds, split, "test", ts, lookback=True)
    r2 = evaluate(back, nds, split, "test", ts2, lookback=True)
    assert r1.rows == r2.rows and list(r1.rows) == ["3", "mean"]


def test_gru_backend_trains(setup):
    nds, split, ts = setup
    cfg = ForecastConfig(backend="gru", d_prime=6, T_f=4, graph=GRAPH)
    run = train(cfg, nds, split, ts, schedule=SCHED, seed=0)
    assert np.isfinite(run.best_val_mae)

