import math

import numpy as np
import pytest

from config import TrainConfig
from errors import ContractViolation, TrainingFailure
from nn import (
    AdamState,
    Mlp,
    adam_step,
    fold_output_affine,
    init_mlp,
    minibatches,
    mlp_backward,
    mlp_forward,
    mlp_from_json,
    mlp_to_json,
    n_params,
    project_input,
    train_loop,
)
from tests.conftest import constant_mlp, linear_mlp

FD_STEP = 1e-6
GRAD_RTOL = 1e-5
GRAD_ATOL = 1e-7
UNICYCLE_BOX = (np.array([-math.pi / 3]), np.array([math.pi / 3]))


def _fd(f, p):
    g = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = FD_STEP
        g[i] = (f(p + e) - f(p - e)) / (2 * FD_STEP)
    return g


# -------------------------
# Forward
# -------------------------
def test_identity_network():
    net = linear_mlp(np.eye(2), np.zeros(2))
    np.testing.assert_allclose(mlp_forward(net, np.array([0.3, -0.7])), [0.3, -0.7])


def test_constant_network(rng):
    net = constant_mlp([3, 4, 1], 2.5)
    np.testing.assert_allclose(mlp_forward(net, rng.normal(size=(10, 3))), 2.5)


def test_hand_built_relu():
    # y = relu(x)
    net = Mlp(layer_sizes=[1, 1, 1], params=np.array([1.0, 0.0, 1.0, 0.0]))
    assert mlp_forward(net, np.array([-1.0]))[0] == 0.0
    assert mlp_forward(net, np.array([2.0]))[0] == 2.0


def test_param_count_and_validation():
    assert n_params([2, 3, 1]) == (2 + 1) * 3 + (3 + 1) * 1
    assert init_mlp([2, 3, 1], 0).params.shape == (13,)
    with pytest.raises(ContractViolation):
        Mlp(layer_sizes=[2, 3, 1], params=np.zeros(5))
    with pytest.raises(ContractViolation):
        mlp_forward(init_mlp([2, 1], 0), np.zeros(3))


def test_init_is_deterministic():
    np.testing.assert_array_equal(init_mlp([2, 8, 1], 5).params, init_mlp([2, 8, 1], 5).params)
    assert not np.array_equal(init_mlp([2, 8, 1], 5).params, init_mlp([2, 8, 1], 6).params)


# -------------------------
# Backward
# -------------------------
def test_backward_matches_finite_differences(rng):
    for trial in range(20):
        sizes = [int(rng.integers(1, 4)), *rng.integers(2, 6, size=int(rng.integers(1, 3))).tolist(),
                 int(rng.integers(1, 3))]
        net = init_mlp(sizes, trial)
        net = net.with_params(net.params + rng.normal(scale=0.1, size=net.params.size))
        x = rng.normal(size=(4, sizes[0]))
        up = rng.normal(size=(4, sizes[-1]))

        g_params, g_input = mlp_backward(net, x, up)
        fd_params = _fd(lambda p: float(np.sum(up * mlp_forward(net.with_params(p), x))), net.params)
        np.testing.assert_allclose(g_params, fd_params, rtol=GRAD_RTOL, atol=GRAD_ATOL)

        fd_input = _fd(lambda z: float(np.sum(up * mlp_forward(net, z.reshape(x.shape)))), x.ravel())
        np.testing.assert_allclose(g_input.ravel(), fd_input, rtol=GRAD_RTOL, atol=GRAD_ATOL)


def test_dead_unit_gets_no_gradient():
    # preactivation −x < 0 for x = 1
    net = Mlp(layer_sizes=[1, 1, 1], params=np.array([-1.0, 0.0, 1.0, 0.0]))
    g, _ = mlp_backward(net, np.array([1.0]), np.array([1.0]))
    assert g[0] == 0.0 and g[1] == 0.0
    assert g[3] == 1.0


def test_zero_upstream_gives_zero_gradient(rng):
    net = init_mlp([3, 5, 2], 1)
    g, gx = mlp_backward(net, rng.normal(size=(6, 3)), np.zeros((6, 2)))
    np.testing.assert_array_equal(g, 0.0)
    np.testing.assert_array_equal(gx, 0.0)


def test_fold_output_affine(rng):
    net = init_mlp([2, 6, 1], 3)
    x = rng.normal(size=(7, 2))
    folded = fold_output_affine(net, 4.0, -1.5)
    np.testing.assert_allclose(mlp_forward(folded, x), 4.0 * mlp_forward(net, x) - 1.5, rtol=1e-12, atol=1e-12)


# -------------------------
# Projection
# -------------------------
def test_projection_inside_box():
    u, mask = project_input(np.array([0.2]), UNICYCLE_BOX)
    assert u[0] == 0.2 and mask[0] == 1.0


def test_projection_clamps():
    u, mask = project_input(np.array([2.0]), UNICYCLE_BOX)
    assert u[0] == pytest.approx(math.pi / 3)
    assert mask[0] == 0.0


def test_projection_slope_inside():
    h = 1e-6
    hi, _ = project_input(np.array([0.1 + h]), UNICYCLE_BOX)
    lo, _ = project_input(np.array([0.1 - h]), UNICYCLE_BOX)
    assert (hi[0] - lo[0]) / (2 * h) == pytest.approx(1.0, abs=1e-8)


# -------------------------
# Adam
# -------------------------
def test_adam_zero_gradient_keeps_params():
    p = np.array([0.5, -0.2])
    new, _ = adam_step(AdamState.fresh(2, 0.1), p, np.zeros(2))
    np.testing.assert_array_equal(new, p)


def test_adam_first_step():
    new, state = adam_step(AdamState.fresh(1, 0.1), np.array([0.0]), np.array([2.0]))
    assert abs(new[0] + 0.1) <= 1e-6
    assert state.t == 1


def test_adam_moves_against_gradient():
    state = AdamState.fresh(1, 0.1)
    p0 = np.array([1.0])
    p1, state = adam_step(state, p0, np.array([3.0]))
    p2, state = adam_step(state, p1, np.array([3.0]))
    assert p2[0] < p1[0] < p0[0]


def test_adam_learning_rate_decays_per_epoch():
    state = AdamState.fresh(1, 0.1, lr_decay=0.5)
    state.epoch = 2
    assert state.lr == pytest.approx(0.025)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(TrainingFailure):
        adam_step(AdamState.fresh(1, 0.1), np.zeros(1), np.array([np.nan]))


# -------------------------
# Training driver
# -------------------------
def test_minibatches_cover_every_index(rng):
    batches = list(minibatches(10, 4, rng))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def _linear_fit_problem(rng):
    X = rng.uniform(-1, 1, size=(64, 1))
    y = 0.5 * X - 0.2

    def loss(net, idx):
        pred = mlp_forward(net, X[idx])
        r = pred - y[idx]
        g, _ = mlp_backward(net, X[idx], 2.0 * r / len(idx))
        return float(np.mean(r * r)), g

    return loss


def test_train_loop_reduces_loss_and_is_deterministic(rng):
    loss = _linear_fit_problem(rng)
    cfg = TrainConfig(hidden=[], epochs=400, batch_size=16, lr=1e-2, lr_decay=0.999)
    a = train_loop(init_mlp([1, 1], 0), 64, loss, cfg, seed=4)
    b = train_loop(init_mlp([1, 1], 0), 64, loss, cfg, seed=4)
    np.testing.assert_array_equal(a.net.params, b.net.params)
    assert a.curve == b.curve
    assert a.final_loss < a.curve[0]
    assert a.final_loss <= 1e-4


def test_train_loop_flags_non_finite_loss():
    cfg = TrainConfig(hidden=[], epochs=1, batch_size=4)
    with pytest.raises(TrainingFailure):
        train_loop(init_mlp([1, 1], 0), 4, lambda net, idx: (float("nan"), np.zeros(2)), cfg, seed=0)


def test_json_codec(rng):
    net = init_mlp([2, 4, 1], 9)
    back = mlp_from_json(mlp_to_json(net))
    x = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(mlp_forward(back, x), mlp_forward(net, x))
    assert back.init_seed == 9
    bad = mlp_to_json(net)
    bad["activations"]["hidden"] = "tanh"
    with pytest.raises(ContractViolation):
        mlp_from_json(bad)
