import math

import numpy as np
import pytest

from config import TrainConfig
from dynamics import SystemModel, get_model
from errors import ContractViolation, UnsupportedConfiguration
from nn import init_mlp, layers, mlp_backward, mlp_forward, project_input
from policyfit import (
    PolicyModel,
    estimate_eps_pi,
    grid_losses,
    load_policy_model,
    loss_mpc,
    loss_mpc_grad_u,
    policy_eval,
    save_policy_model,
    set_distance_1d,
    train_policy_bc,
    train_policy_il,
)
from valuefit import NetworkValue
from tests.conftest import linear_mlp

FD_STEP = 1e-6
GRAD_RTOL = 1e-5
QUAD_BOX = (np.array([-1.5]), np.array([1.5]))
Q1 = np.eye(1)
R0 = np.zeros((1, 1))
Q2 = np.diag([0.0, 1.0])
R2 = np.array([[5.0]])


def _positive_value(seed):
    net = init_mlp([2, 8, 1], seed)
    _, b = layers(net)[-1]
    b[...] = 10.0
    return NetworkValue(net)


def identity_policy() -> PolicyModel:
    return PolicyModel(linear_mlp([[1.0]], [0.0]), *QUAD_BOX, method="il")


# -------------------------
# Look-ahead loss
# -------------------------
def test_loss_examples(exact_value):
    model = get_model("quad1d")
    assert loss_mpc(np.array([0.5]), np.array([0.5]), exact_value, model, Q1, R0) == pytest.approx(0.25)
    assert loss_mpc(np.array([0.0]), np.array([0.0]), exact_value, model, Q1, R0) == 0.0


def test_loss_batches(exact_value):
    model = get_model("quad1d")
    x = np.array([[0.5], [0.2]])
    u = np.array([[0.1], [0.2]])
    L = loss_mpc(x, u, exact_value, model, Q1, R0)
    assert L.shape == (2,)
    assert L[1] == pytest.approx(0.04)
    with pytest.raises(ContractViolation):
        loss_mpc(x, u[:1], exact_value, model, Q1, R0)


def test_loss_gradient_quad1d(exact_value, rng):
    model = get_model("quad1d")
    for _ in range(50):
        x, u = rng.uniform(-1.5, 1.5, size=1), rng.uniform(-1.5, 1.5, size=1)
        fd = (loss_mpc(x, u + FD_STEP, exact_value, model, Q1, R0)
              - loss_mpc(x, u - FD_STEP, exact_value, model, Q1, R0)) / (2 * FD_STEP)
        np.testing.assert_allclose(loss_mpc_grad_u(x, u, exact_value, model, Q1, R0), [fd], rtol=GRAD_RTOL, atol=1e-8)


def test_loss_gradient_unicycle_network_value(rng):
    model = get_model("unicycle")
    value = _positive_value(0)
    for _ in range(50):
        x, u = rng.uniform(-1.5, 1.5, size=2), rng.uniform(-1.0, 1.0, size=1)
        fd = (loss_mpc(x, u + FD_STEP, value, model, Q2, R2) - loss_mpc(x, u - FD_STEP, value, model, Q2, R2)) / (
            2 * FD_STEP)
        np.testing.assert_allclose(loss_mpc_grad_u(x, u, value, model, Q2, R2), [fd], rtol=GRAD_RTOL, atol=1e-7)


def test_full_chain_gradient_through_projection(rng):
    model = get_model("unicycle")
    value = _positive_value(1)
    net = init_mlp([2, 6, 1], 3)
    net = net.with_params(0.3 * net.params)
    box = (model.u_lower, model.u_upper)
    X = rng.uniform(-1, 1, size=(8, 2))

    def mean_loss(params):
        u, _ = project_input(mlp_forward(net.with_params(params), X), box)
        return float(np.mean(loss_mpc(X, u, value, model, Q2, R2)))

    u, mask = project_input(mlp_forward(net, X), box)
    assert np.all(mask == 1.0)
    gu = loss_mpc_grad_u(X, u, value, model, Q2, R2)
    g, _ = mlp_backward(net, X, gu * mask / len(X))
    fd = np.zeros_like(net.params)
    for i in range(net.params.size):
        e = np.zeros_like(net.params)
        e[i] = FD_STEP
        fd[i] = (mean_loss(net.params + e) - mean_loss(net.params - e)) / (2 * FD_STEP)
    np.testing.assert_allclose(g, fd, rtol=GRAD_RTOL, atol=1e-7)


# -------------------------
# Gridding
# -------------------------
def test_grid_needs_scalar_input(exact_value):
    model = SystemModel("twin", 1, 2, np.array([-1.0, -1.0]), np.array([1.0, 1.0]),
                        lambda x, u: x + u.sum(-1, keepdims=True), lambda x, u: (None, None))
    with pytest.raises(UnsupportedConfiguration):
        grid_losses(np.array([0.1]), exact_value, model, Q1, R0, 10)


def test_grid_losses_shape(exact_value):
    grid, losses = grid_losses(np.array([[0.1], [0.2], [0.3]]), exact_value, get_model("quad1d"), Q1, R0, 7)
    assert grid.shape == (7,)
    assert losses.shape == (3, 7)
    assert grid[0] == -1.5 and grid[-1] == 1.5


def test_set_distance():
    np.testing.assert_allclose(set_distance_1d([0.5, -0.5, 0.0, 0.2], [0.5, 0.5, 0.5, -0.3]), [0.0, 0.0, 0.5, 0.1])


def test_eps_pi_of_an_optimal_policy(exact_value):
    states = np.linspace(-1, 1, 101)[:, None]
    abs_b, rel_b = estimate_eps_pi(identity_policy(), states, exact_value, get_model("quad1d"), Q1, R0, 1000)
    assert abs_b <= 1e-3
    assert rel_b <= 1e-3


def test_eps_pi_of_a_poor_policy(exact_value):
    states = np.linspace(0.5, 1, 11)[:, None]
    zero = PolicyModel(linear_mlp([[0.0]], [0.0]), *QUAD_BOX, method="bc")
    abs_b, _ = estimate_eps_pi(zero, states, exact_value, get_model("quad1d"), Q1, R0, 1000)
    assert abs_b == pytest.approx(1.0, abs=1e-3)


# -------------------------
# Training
# -------------------------
def test_policy_outputs_stay_in_box(rng):
    pm = PolicyModel(linear_mlp([[50.0], [-50.0]], [0.0]),
                     np.array([-math.pi / 3]), np.array([math.pi / 3]))
    u = policy_eval(pm, rng.uniform(-10, 10, size=(100_000, 2)))
    assert np.all(u >= -math.pi / 3) and np.all(u <= math.pi / 3)


def test_bc_recovers_linear_targets(rng):
    X = rng.uniform(-1, 1, size=(200, 1))
    cfg = TrainConfig(hidden=[], epochs=400, batch_size=32, lr=1e-2, lr_decay=0.995)
    fit = train_policy_bc(X, 0.5 * X, QUAD_BOX, cfg, seed=0)
    X_test = np.linspace(-1, 1, 101)[:, None]
    err = policy_eval(fit.policy, X_test) - 0.5 * X_test
    assert float(np.mean(err**2)) <= 1e-4
    assert fit.policy.method == "bc"


def test_bc_lands_on_the_conditional_mean():
    X = np.full((200, 1), 0.5)
    targets = np.where(np.arange(200) % 2 == 0, 0.4, -0.4)[:, None]
    cfg = TrainConfig(hidden=[], epochs=300, batch_size=200, lr=1e-2, lr_decay=0.999)
    fit = train_policy_bc(X, targets, QUAD_BOX, cfg, seed=0)
    assert abs(policy_eval(fit.policy, np.array([0.5]))[0]) <= 0.05


def test_il_reduces_look_ahead_loss(exact_value):
    states = np.linspace(0.2, 1.0, 64)[:, None]
    model = get_model("quad1d")
    cfg = TrainConfig(hidden=[], epochs=200, batch_size=16, lr=1e-2, lr_decay=0.999)
    fit = train_policy_il(states, exact_value, model, Q1, R0, cfg, seed=1)
    assert fit.curve[-1] < fit.curve[0]
    d = set_distance_1d(policy_eval(fit.policy, states)[:, 0], states[:, 0])
    assert float(np.mean(d)) <= 0.1


def test_training_rejects_empty_data(exact_value):
    cfg = TrainConfig(hidden=[2], epochs=1)
    with pytest.raises(ContractViolation):
        train_policy_il(np.zeros((0, 1)), exact_value, get_model("quad1d"), Q1, R0, cfg, seed=0)
    with pytest.raises(ContractViolation):
        train_policy_bc(np.zeros((0, 1)), np.zeros((0, 1)), QUAD_BOX, cfg, seed=0)


def test_policy_codec(tmp_path, rng):
    pm = PolicyModel(init_mlp([2, 4, 1], 0), np.array([-1.0]), np.array([1.0]), method="bc")
    save_policy_model(pm, tmp_path, {"provenance": "xyz"})
    back = load_policy_model(tmp_path)
    assert back.method == "bc"
    x = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(policy_eval(back, x), policy_eval(pm, x))


# -------------------------
# Scalar benchmark
# -------------------------
@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_il_and_bc_on_the_set_valued_example(seed, exact_value):
    from config import SolverConfig, UniformBox, load_experiment
    from data import dataset_arrays, generate_dataset

    exp = load_experiment("quad1d")
    model = get_model("quad1d")
    records = generate_dataset(exp.problem, UniformBox(lower=[-1.0], upper=[1.0], n=10_000),
                               SolverConfig(init="symmetric_state"), seed)
    arr = dataset_arrays(records)
    grid = np.linspace(-1, 1, 401)[:, None]

    bc = train_policy_bc(arr["x"], arr["u"], QUAD_BOX, exp.policy_train, seed)
    u_bc = policy_eval(bc.policy, grid)[:, 0]
    assert np.max(np.abs(u_bc)) <= 0.05
    assert abs(float(np.mean(set_distance_1d(u_bc, grid[:, 0]))) - 0.5) <= 0.05

    il = train_policy_il(arr["x"], exact_value, model, Q1, R0, exp.policy_train, seed)
    assert np.max(set_distance_1d(policy_eval(il.policy, grid)[:, 0], grid[:, 0])) <= 0.05
