import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepgraph.tensor_core import (
    ConfigError,
    LrSchedule,
    MLP,
    OptimizerState,
    ShapeError,
    Tensor,
    TransformerBlock,
    adam_step,
    adamw_step,
    backward,
    clip_gradients,
    concat,
    conv1d,
    layer_norm,
    lr_at,
    matmul,
    parameter,
    relu,
    scaled_dot_product_attention,
    softmax,
    take,
    take_along_axis,
)
from stepgraph.tensor_core.gradcheck import check_gradients


def test_softmax_symmetric():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_layer_norm_constant_is_zero():
    out = layer_norm(Tensor(np.full(7, 3.25)))
    assert np.array_equal(out.data, np.zeros(7))


def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_shape_errors_name_primitive():
    with pytest.raises(ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError, match="concat"):
        concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_distribution(xs):
    y = softmax(Tensor(xs)).data
    assert (y >= 0).all()
    assert abs(y.sum() - 1.0) < 1e-12


# -- attention ---------------------------------------------------------------
def test_attention_uniform_when_keys_identical():
    rng = np.random.default_rng(1)
    q = Tensor(rng.normal(size=(5, 4)))
    k = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    v = Tensor(rng.normal(size=(5, 4)))
    out = scaled_dot_product_attention(q, k, v, heads=2)
    assert np.allclose(out.data, np.tile(v.data.mean(axis=0), (5, 1)), atol=1e-12)


def test_attention_length_one_returns_v():
    rng = np.random.default_rng(2)
    q, k, v = (Tensor(rng.normal(size=(1, 6))) for _ in range(3))
    assert np.allclose(scaled_dot_product_attention(q, k, v, heads=3).data, v.data)


def test_attention_matches_dense_formula():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(2, 4)) for _ in range(3))
    heads = 2
    dh = 4 // heads
    expected = np.zeros((2, 4))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(2):
            scores = [sum(q[i, sl][c] * k[j, sl][c] for c in range(dh)) / math.sqrt(dh) for j in range(2)]
            mx = max(scores)
            w = [math.exp(s - mx) for s in scores]
            w = [x / sum(w) for x in w]
            for c in range(dh):
                expected[i, sl][c] = sum(w[j] * v[j, sl][c] for j in range(2))
    out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), heads)
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_attention_heads_must_divide_width():
    x = Tensor(np.ones((3, 6)))
    with pytest.raises(ConfigError):
        scaled_dot_product_attention(x, x, x, heads=4)


# -- backward ----------------------------------------------------------------
def test_backward_square():
    x = parameter([1.0, 2.0])
    loss = (x * x).sum()
    backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0])
    assert np.array_equal(loss.grad, np.ones(()))


def test_backward_relu_negative():
    x = parameter(-3.0)
    backward(relu(x))
    assert x.grad == 0.0


def test_backward_unreachable_params_zero():
    x, y = parameter([1.0]), parameter([5.0, 6.0])
    backward((x * 3.0).sum(), params=[x, y])
    assert np.array_equal(y.grad, np.zeros(2))


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        backward(parameter([1.0, 2.0]) * 2.0)


def test_three_layer_perceptron_finite_differences():
    rng = np.random.default_rng(4)
    w1, w2, w3 = (parameter(rng.normal(size=s)) for s in [(4, 5), (5, 5), (5, 2)])
    x = Tensor(rng.normal(size=(3, 4)))
    target = rng.normal(size=(3, 2))

    def loss():
        h = matmul(x, w1).tanh()
        h = matmul(h, w2).sigmoid()
        out = matmul(h, w3)
        return ((out - target) ** 2).mean()

    assert check_gradients(loss, [w1, w2, w3]) < 1e-4


def test_primitive_gradients():
    rng = np.random.default_rng(5)
    x = parameter(rng.normal(size=(2, 3, 9)))
    w = parameter(rng.normal(size=(4, 3, 3)))
    b = parameter(rng.normal(size=4))
    gamma = parameter(rng.normal(size=9))
    beta = parameter(rng.normal(size=9))
    emb = parameter(rng.normal(size=(6, 3)))
    probe = rng.normal(size=(2, 4, 3))
    idx = np.array([[0, 8, 8], [3, 1, 2]])

    def loss():
        y = conv1d(x, w, b, stride=2, dilation=2)
        z = layer_norm(x, gamma, beta).softmax(axis=1)
        g = take_along_axis(x, idx, axis=2)
        e = take(emb, [1, 1, 4])
        c = concat([y.mean(axis=2, keepdims=True), z[:, :1, :1]], axis=1)
        return ((y * probe).sum() + (c**2).sum() + (g.abs() * 0.3).sum()
                + (e.exp() * 0.1).sum() + z[:, :, 2:5].transpose(0, 2, 1).reshape(-1).sum())

    assert check_gradients(loss, [x, w, b, gamma, beta, emb]) < 1e-4


def test_backward_deterministic():
    rng = np.random.default_rng(6)
    block = TransformerBlock(8, 2, rng)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    loss = (block(x) ** 2).mean()
    backward(loss)
    first = [p.grad.copy() for p in block.parameters()]
    block.zero_grad()
    backward(loss)
    for a, b in zip(first, block.parameters()):
        assert np.array_equal(a, b.grad)


def test_transformer_block_finite_differences():
    rng = np.random.default_rng(7)
    block = TransformerBlock(4, 2, rng)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    probe = rng.normal(size=(2, 3, 4))

    def loss():
        return (block(x) * probe).sum()

    assert check_gradients(loss, block.parameters()) < 1e-4


# -- optimizers --------------------------------------------------------------
def _adam_oracle(x0, grad_fn, steps, lr, b1, b2, eps, wd, decoupled):
    x, m, v = x0, 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        if decoupled:
            x = x - lr * wd * x
        else:
            g = g + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(x)
    return traj


@pytest.mark.parametrize("update,decoupled,wd", [(adamw_step, True, 0.0), (adamw_step, True, 0.1),
                                                 (adam_step, False, 1e-5), (adam_step, False, 0.2)])
def test_adam_trajectory_matches_transcription(update, decoupled, wd):
    p = parameter([1.0])
    state = OptimizerState(lr=0.05, betas=(0.9, 0.95), eps=1e-8, weight_decay=wd)
    traj = []
    for _ in range(10):
        update(state, [p], [2.0 * p.data])
        traj.append(p.data[0])
    oracle = _adam_oracle(1.0, lambda x: 2 * x, 10, 0.05, 0.9, 0.95, 1e-8, wd, decoupled)
    assert np.max(np.abs(np.array(traj) - oracle)) < 1e-12
    assert state.step == 10


def test_adamw_first_step_moves_by_lr():
    p = parameter([0.3])
    adamw_step(OptimizerState(lr=5e-4, betas=(0.9, 0.95)), [p], [np.array([2.5])])
    assert abs((p.data[0] - 0.3) + 5e-4) < 1e-10


def test_zero_gradient_leaves_param():
    p = parameter([0.7, -1.2])
    adamw_step(OptimizerState(lr=1e-3), [p], [np.zeros(2)])
    assert np.array_equal(p.data, [0.7, -1.2])


def test_adam_decay_zero_equals_adamw():
    a, b = parameter([1.5, -0.5]), parameter([1.5, -0.5])
    sa, sb = OptimizerState(lr=0.01), OptimizerState(lr=0.01)
    for g in ([0.3, -2.0], [1.0, 0.1], [-0.4, 0.4]):
        adam_step(sa, [a], [np.array(g)])
        adamw_step(sb, [b], [np.array(g)])
    assert np.array_equal(a.data, b.data)


def test_adam_decay_only_shrinks():
    p = parameter([2.0, -2.0])
    adam_step(OptimizerState(lr=0.1, weight_decay=0.01), [p], [np.zeros(2)])
    assert np.all(np.abs(p.data) < 2.0)


# -- schedules and clipping --------------------------------------------------
def test_lr_schedule_values():
    pre = LrSchedule(5.0e-4, (50,), 0.5)
    assert lr_at(pre, 49) == 5.0e-4
    assert lr_at(pre, 50) == 2.5e-4
    assert lr_at(LrSchedule(0.3), 1000) == 0.3
    assert lr_at(LrSchedule(1.0, (1, 18), 0.5), 20) == 0.25


@given(st.lists(st.integers(0, 100), max_size=6), st.integers(0, 120), st.integers(0, 120))
def test_lr_non_increasing(milestones, e1, e2):
    sched = LrSchedule(1.0, tuple(milestones), 0.5)
    lo, hi = sorted((e1, e2))
    assert lr_at(sched, hi) <= lr_at(sched, lo)


def test_clip_examples():
    p = parameter([0.0, 0.0])
    p.grad = np.array([6.0, 8.0])
    assert clip_gradients([p], 5.0) == 0.5
    p.grad = np.array([0.0, 3.0])
    assert clip_gradients([p], 5.0) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
def test_clip_norm_and_idempotence(seed, max_norm):
    rng = np.random.default_rng(seed)
    params = [parameter(np.zeros(s)) for s in [(3,), (2, 2)]]
    for p in params:
        p.grad = rng.normal(scale=3.0, size=p.shape)
    before = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    clip_gradients(params, max_norm)
    after = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    assert abs(after - min(before, max_norm)) < 1e-12 * max(1.0, before)
    snapshot = [p.grad.copy() for p in params]
    assert clip_gradients(params, max_norm) == 1.0
    assert all(np.array_equal(a, p.grad) for a, p in zip(snapshot, params))


def test_mlp_gradcheck_small():
    rng = np.random.default_rng(8)
    mlp = MLP(3, 5, 2, rng)
    x = Tensor(rng.normal(size=(4, 3)))

    def loss():
        return (mlp(x) ** 2).sum()

    assert check_gradients(loss, mlp.parameters()) < 1e-4
