import numpy as np
import pytest

from config import ObstacleConstraint, ProblemConfig, SolverConfig, TrainConfig
from nn import Mlp, init_mlp, layers
from scmpc import ScmpcProblem, build_problem
from valuefit import QuadraticValue


def constant_mlp(sizes, c: float) -> Mlp:
    net = init_mlp(sizes, 0)
    W, b = layers(net)[-1]
    W[...] = 0.0
    b[...] = c
    return net


def linear_mlp(W, b) -> Mlp:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    return Mlp(layer_sizes=[W.shape[0], W.shape[1]], params=np.concatenate([W.ravel(), b]))


def unicycle_problem(N: int = 1, constrained: bool = True) -> ScmpcProblem:
    return build_problem(ProblemConfig(
        model="unicycle",
        N=N,
        Q=[[0.0, 0.0], [0.0, 1.0]],
        R=[[5.0]],
        Q_N=[[0.0, 0.0], [0.0, 100.0]],
        rho=15000.0,
        eta=0.01,
        constraint=ObstacleConstraint(radius=0.5) if constrained else None,
    ))


@pytest.fixture
def quad_problem() -> ScmpcProblem:
    return build_problem(ProblemConfig(model="quad1d", N=1, Q=[[1.0]], R=[[0.0]], Q_N=[[1.0]]))


@pytest.fixture
def obstacle_problem() -> ScmpcProblem:
    return unicycle_problem(N=1)


@pytest.fixture
def exact_value() -> QuadraticValue:
    return QuadraticValue(np.array([[1.0]]))


@pytest.fixture
def symmetric_solver() -> SolverConfig:
    return SolverConfig(init="symmetric_state")


@pytest.fixture
def small_train() -> TrainConfig:
    return TrainConfig(hidden=[8], epochs=50, batch_size=32, lr=1e-2, lr_decay=0.99)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
