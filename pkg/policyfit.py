# policyfit.py
"""
Policy training (second stage) and the behavioral-cloning baseline.

Imitation learning minimizes the one-step look-ahead loss
    L(x, u) = ℓ(x, u) + V(f(x, u))
over the policy parameters with the value model frozen. Behavioral cloning
regresses recorded MPC inputs instead and, for set-valued MPC policies,
ends up at the conditional mean of the recorded inputs.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from artifacts import read_json, write_json
from config import TrainConfig
from dynamics import SystemModel, jacobians, step
from errors import ContractViolation, UnsupportedConfiguration
from nn import Mlp, forward_with_cache, init_mlp, mlp_backward, mlp_forward, mlp_from_json, mlp_to_json, project_input, train_loop
from valuefit import ValueModel, value_eval, value_input_grad

logger = logging.getLogger(__name__)

GRID_CHUNK_ROWS = 200_000


@dataclass
class PolicyModel:
    net: Mlp
    lower: np.ndarray
    upper: np.ndarray
    method: str = "il"

    @property
    def box(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper


def policy_eval(pm: PolicyModel, x) -> np.ndarray:
    """π(x) = clamp(net(x)) to the input box; batch or single state."""
    u, _ = project_input(mlp_forward(pm.net, x), pm.box)
    return u


def raw_policy_eval(pm: PolicyModel, x) -> np.ndarray:
    return mlp_forward(pm.net, x)


# -------------------------
# One-step look-ahead loss
# -------------------------
def _pairs(x, u) -> Tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    x2, u2 = np.atleast_2d(x), np.atleast_2d(u)
    if len(x2) != len(u2):
        raise ContractViolation(f"{len(x2)} states but {len(u2)} inputs")
    return x2, u2, single


def loss_mpc(x, u, value: ValueModel, model: SystemModel, Q, R):
    x2, u2, single = _pairs(x, u)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    stage = np.einsum("bi,ij,bj->b", x2, Q, x2) + np.einsum("bi,ij,bj->b", u2, R, u2)
    L = stage + value_eval(value, step(model, x2, u2))
    return float(L[0]) if single else L


def loss_mpc_grad_u(x, u, value: ValueModel, model: SystemModel, Q, R) -> np.ndarray:
    """∂L/∂u = (R + Rᵀ)u + Bᵀ∇V(f(x, u))."""
    x2, u2, single = _pairs(x, u)
    R = np.asarray(R, dtype=float)
    _, B = jacobians(model, x2, u2)
    gV = value_input_grad(value, step(model, x2, u2))
    g = u2 @ (R + R.T) + np.einsum("bxu,bx->bu", B, gV)
    return g[0] if single else g


def grid_losses(x, value: ValueModel, model: SystemModel, Q, R, n_grid: int) -> Tuple[np.ndarray, np.ndarray]:
    """Look-ahead loss on n_grid equispaced inputs per state: (grid, losses (B, n_grid))."""
    if model.n_u != 1:
        raise UnsupportedConfiguration(f"input gridding needs a scalar input, model has n_u = {model.n_u}")
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    grid = np.linspace(model.u_lower[0], model.u_upper[0], n_grid)
    out = np.empty((len(x2), n_grid))
    per_chunk = max(1, GRID_CHUNK_ROWS // n_grid)
    for s in range(0, len(x2), per_chunk):
        xc = x2[s:s + per_chunk]
        xs = np.repeat(xc, n_grid, axis=0)
        us = np.tile(grid, len(xc))[:, None]
        out[s:s + len(xc)] = loss_mpc(xs, us, value, model, Q, R).reshape(len(xc), n_grid)
    return grid, out


def set_distance_1d(u, x) -> np.ndarray:
    """Distance of u to the optimal input set {x, −x}."""
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    return np.minimum(np.abs(u - x), np.abs(u + x))


# -------------------------
# Training
# -------------------------
@dataclass
class PolicyFit:
    policy: PolicyModel
    lr: float
    lr_decay: float
    loss: float
    curve: List[float] = field(default_factory=list)


def _il_cell(states, value, model, Q, R, cfg: TrainConfig, seed: int, lr: float, decay: float) -> PolicyFit:
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    box = (model.u_lower, model.u_upper)
    sizes = [model.n_x, *cfg.hidden, model.n_u]

    def objective(net: Mlp, idx: np.ndarray):
        xb = states[idx]
        raw, cache = forward_with_cache(net, xb)
        u, mask = project_input(raw, box)
        L = loss_mpc(xb, u, value, model, Q, R)
        gu = loss_mpc_grad_u(xb, u, value, model, Q, R)
        g, _ = mlp_backward(net, xb, gu * mask / len(idx), cache)
        return float(np.mean(L)), g

    res = train_loop(init_mlp(sizes, seed), len(states), objective, cfg, seed, lr=lr, lr_decay=decay,
                     desc=f"il lr={lr:g} decay={decay:g}")
    pm = PolicyModel(res.net, model.u_lower.copy(), model.u_upper.copy(), method="il")
    final = float(np.mean(loss_mpc(states, policy_eval(pm, states), value, model, Q, R)))
    return PolicyFit(pm, lr, decay, final, res.curve)


def _bc_cell(states, targets, box, cfg: TrainConfig, seed: int, lr: float, decay: float) -> PolicyFit:
    sizes = [states.shape[1], *cfg.hidden, targets.shape[1]]

    def objective(net: Mlp, idx: np.ndarray):
        xb = states[idx]
        raw, cache = forward_with_cache(net, xb)
        u, mask = project_input(raw, box)
        r = u - targets[idx]
        g, _ = mlp_backward(net, xb, 2.0 * r * mask / len(idx), cache)
        return float(np.mean(np.sum(r * r, axis=1))), g

    res = train_loop(init_mlp(sizes, seed), len(states), objective, cfg, seed, lr=lr, lr_decay=decay,
                     desc=f"bc lr={lr:g} decay={decay:g}")
    pm = PolicyModel(res.net, np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float), method="bc")
    r = policy_eval(pm, states) - targets
    return PolicyFit(pm, lr, decay, float(np.mean(np.sum(r * r, axis=1))), res.curve)


def _il_star(args) -> PolicyFit:
    return _il_cell(*args)


def _bc_star(args) -> PolicyFit:
    return _bc_cell(*args)


def _grid_search(fn, jobs: List[tuple], workers: int, label: str) -> PolicyFit:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(fn, jobs))
    else:
        fits = [fn(j) for j in jobs]
    best = min(fits, key=lambda f: f.loss)
    logger.info("%s: best cell lr=%g decay=%g loss=%.6g (%d cells)", label, best.lr, best.lr_decay, best.loss, len(fits))
    return best


def train_policy_il(states, value: ValueModel, model: SystemModel, Q, R, train_cfg: TrainConfig, seed: int,
                    workers: int = 1) -> PolicyFit:
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or len(states) == 0 or states.shape[1] != model.n_x:
        raise ContractViolation(f"IL needs a nonempty (n, {model.n_x}) state array")
    jobs = [(states, value, model, Q, R, train_cfg, seed, lr, d) for lr, d in train_cfg.cells()]
    return _grid_search(_il_star, jobs, workers, "policy_il")


def train_policy_bc(states, targets, box: Tuple[np.ndarray, np.ndarray], train_cfg: TrainConfig, seed: int,
                    workers: int = 1) -> PolicyFit:
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if len(states) == 0 or len(states) != len(targets):
        raise ContractViolation("BC needs a nonempty set of (state, input) pairs")
    jobs = [(states, targets, box, train_cfg, seed, lr, d) for lr, d in train_cfg.cells()]
    return _grid_search(_bc_star, jobs, workers, "policy_bc")


def estimate_eps_pi(policy: PolicyModel, states, value: ValueModel, model: SystemModel, Q, R,
                    grid_n: int) -> Tuple[float, float]:
    """
    Loss suboptimality of the policy against the gridded minimizer.
    Gaps below zero (policy beats the grid) count as zero.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    _, losses = grid_losses(states, value, model, Q, R, grid_n)
    best = losses.min(axis=1)
    gap = np.maximum(0.0, loss_mpc(states, policy_eval(policy, states), value, model, Q, R) - best)
    return float(np.max(gap)), float(np.max(gap / (np.abs(best) + 1.0)))


# -------------------------
# Persistence
# -------------------------
def save_policy_model(pm: PolicyModel, directory: Path, meta: Dict[str, Any]) -> List[Path]:
    directory = Path(directory)
    desc = {
        "method": pm.method,
        "lower": pm.lower.tolist(),
        "upper": pm.upper.tolist(),
        "net": mlp_to_json(pm.net),
        **meta,
    }
    return [write_json(directory / "policy.json", desc)]


def load_policy_model(directory: Path) -> PolicyModel:
    desc = read_json(Path(directory) / "policy.json")
    return PolicyModel(
        net=mlp_from_json(desc["net"]),
        lower=np.asarray(desc["lower"], dtype=float),
        upper=np.asarray(desc["upper"], dtype=float),
        method=desc["method"],
    )
