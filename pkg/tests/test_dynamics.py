import math

import numpy as np
import pytest

from dynamics import MODELS, UNICYCLE_SPEED, fd_jacobians, get_model, jacobians, step
from errors import ContractViolation

JAC_RTOL = 1e-5
JAC_ATOL = 1e-8


def test_unicycle_jacobians_at_zero_heading():
    A, B = jacobians(get_model("unicycle"), np.array([0.3, -0.2]), np.array([0.0]))
    np.testing.assert_allclose(A, np.eye(2))
    np.testing.assert_allclose(B, [[0.0], [0.05]])


def test_quad1d_jacobians():
    model = get_model("quad1d")
    A, B = jacobians(model, np.array([0.5]), np.array([0.3]))
    np.testing.assert_allclose(A, [[1.0]])
    np.testing.assert_allclose(B, [[-0.6]])
    A, B = jacobians(model, np.array([0.0]), np.array([0.0]))
    np.testing.assert_allclose(A, [[0.0]])
    np.testing.assert_allclose(B, [[0.0]])


@pytest.mark.parametrize("name,x_box,u_box", [
    ("quad1d", (-1.5, 1.5), (-1.5, 1.5)),
    ("unicycle", (-2.0, 2.0), (-math.pi / 3, math.pi / 3)),
])
def test_analytic_jacobians_match_finite_differences(name, x_box, u_box, rng):
    model = MODELS[name]
    for _ in range(100):
        x = rng.uniform(*x_box, size=model.n_x)
        u = rng.uniform(*u_box, size=model.n_u)
        A, B = jacobians(model, x, u)
        A_fd, B_fd = fd_jacobians(model, x, u)
        np.testing.assert_allclose(A, A_fd, rtol=JAC_RTOL, atol=JAC_ATOL)
        np.testing.assert_allclose(B, B_fd, rtol=JAC_RTOL, atol=JAC_ATOL)


def test_unicycle_moves_at_constant_speed(rng):
    model = get_model("unicycle")
    x = rng.uniform(-2, 2, size=(50, 2))
    u = rng.uniform(-math.pi / 3, math.pi / 3, size=(50, 1))
    np.testing.assert_allclose(np.linalg.norm(step(model, x, u) - x, axis=1), UNICYCLE_SPEED)


def test_batched_jacobian_shapes():
    model = get_model("unicycle")
    A, B = jacobians(model, np.zeros((4, 3, 2)), np.zeros((4, 3, 1)))
    assert A.shape == (4, 3, 2, 2)
    assert B.shape == (4, 3, 2, 1)


def test_dimension_mismatch_is_rejected():
    with pytest.raises(ContractViolation):
        step(get_model("quad1d"), np.zeros(2), np.zeros(1))


def test_unknown_model():
    with pytest.raises(ContractViolation, match="Unknown system model"):
        get_model("pendulum")
