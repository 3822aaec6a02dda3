# dynamics.py
"""
Discrete-time system models x⁺ = f(x, u) with analytic Jacobians.

Models are plain closures registered by name. All maps broadcast over leading
batch axes: x has shape (..., n_x), u has shape (..., n_u).
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np

from errors import ContractViolation

StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
JacFn = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class SystemModel:
    name: str
    n_x: int
    n_u: int
    u_lower: np.ndarray
    u_upper: np.ndarray
    step_fn: StepFn
    jac_fn: JacFn

    def __post_init__(self):
        if self.u_lower.shape != (self.n_u,) or self.u_upper.shape != (self.n_u,):
            raise ContractViolation(f"{self.name}: input box must have {self.n_u} entries")
        if np.any(self.u_lower > self.u_upper):
            raise ContractViolation(f"{self.name}: input box is empty")


def _check(model: SystemModel, x: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 0 or x.shape[-1] != model.n_x:
        raise ContractViolation(f"{model.name}: state must have trailing dimension {model.n_x}, got {x.shape}")
    if u.ndim == 0 or u.shape[-1] != model.n_u:
        raise ContractViolation(f"{model.name}: input must have trailing dimension {model.n_u}, got {u.shape}")
    return x, u


def step(model: SystemModel, x, u) -> np.ndarray:
    x, u = _check(model, x, u)
    return model.step_fn(x, u)


def jacobians(model: SystemModel, x, u) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (A, B) with shapes (..., n_x, n_x) and (..., n_x, n_u)."""
    x, u = _check(model, x, u)
    return model.jac_fn(x, u)


def fd_jacobians(model: SystemModel, x, u, h: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of a single (x, u) pair."""
    x, u = _check(model, x, u)
    A = np.zeros((model.n_x, model.n_x))
    B = np.zeros((model.n_x, model.n_u))
    for j in range(model.n_x):
        e = np.zeros(model.n_x)
        e[j] = h
        A[:, j] = (model.step_fn(x + e, u) - model.step_fn(x - e, u)) / (2 * h)
    for j in range(model.n_u):
        e = np.zeros(model.n_u)
        e[j] = h
        B[:, j] = (model.step_fn(x, u + e) - model.step_fn(x, u - e)) / (2 * h)
    return A, B


# -------------------------
# Registered models
# -------------------------
UNICYCLE_SPEED = 0.05


def _unicycle_step(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    th = u[..., 0]
    return x + UNICYCLE_SPEED * np.stack([np.cos(th), np.sin(th)], axis=-1)


def _unicycle_jac(x: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    th = u[..., 0]
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    A = np.broadcast_to(np.eye(2), batch + (2, 2)).copy()
    B = UNICYCLE_SPEED * np.stack([-np.sin(th), np.cos(th)], axis=-1)[..., None]
    return A, np.broadcast_to(B, batch + (2, 1)).copy()


def _quad1d_step(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return x**2 - u**2


def _quad1d_jac(x: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    A = np.broadcast_to((2.0 * x)[..., None], batch + (1, 1)).copy()
    B = np.broadcast_to((-2.0 * u)[..., None], batch + (1, 1)).copy()
    return A, B


MODELS: Dict[str, SystemModel] = {}


def register_model(model: SystemModel) -> SystemModel:
    MODELS[model.name] = model
    return model


def get_model(name: str) -> SystemModel:
    try:
        return MODELS[name]
    except KeyError:
        raise ContractViolation(f"Unknown system model '{name}' (known: {sorted(MODELS)})")


register_model(SystemModel(
    name="unicycle",
    n_x=2,
    n_u=1,
    u_lower=np.array([-math.pi / 3.0]),
    u_upper=np.array([math.pi / 3.0]),
    step_fn=_unicycle_step,
    jac_fn=_unicycle_jac,
))

register_model(SystemModel(
    name="quad1d",
    n_x=1,
    n_u=1,
    u_lower=np.array([-1.5]),
    u_upper=np.array([1.5]),
    step_fn=_quad1d_step,
    jac_fn=_quad1d_jac,
))
