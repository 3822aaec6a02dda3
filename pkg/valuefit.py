# valuefit.py
"""
Value-function regression (first stage of the learning procedure).

The optimal SCMPC value is learned as two networks, one for the performance
part and one for the penalty part, combined as
    V(x) = max(0, net_p(x)) + max(0, net_xi(x)).
The penalty part spans several orders of magnitude more than the performance
part, which is why the two are regressed separately.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from artifacts import read_json, write_json
from config import TrainConfig
from errors import ContractViolation, TrainingFailure
from nn import (
    Mlp,
    fold_output_affine,
    forward_with_cache,
    init_mlp,
    layers,
    mlp_backward,
    mlp_forward,
    mlp_from_json,
    mlp_to_json,
    train_loop,
)

logger = logging.getLogger(__name__)


@dataclass
class NetworkValue:
    net_p: Mlp
    net_xi: Optional[Mlp] = None


@dataclass
class QuadraticValue:
    """Closed-form V(x) = xᵀPx."""

    P: np.ndarray


ValueModel = Union[NetworkValue, QuadraticValue]


def _rows(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def value_parts(vm: ValueModel, x) -> Tuple[np.ndarray, np.ndarray]:
    """Raw (unclamped) performance and penalty outputs, one entry per row of x."""
    xb, _ = _rows(x)
    if isinstance(vm, QuadraticValue):
        return np.einsum("bi,ij,bj->b", xb, vm.P, xb), np.zeros(len(xb))
    p = mlp_forward(vm.net_p, xb)[:, 0]
    xi = mlp_forward(vm.net_xi, xb)[:, 0] if vm.net_xi is not None else np.zeros(len(xb))
    return p, xi


def value_eval(vm: ValueModel, x):
    xb, single = _rows(x)
    p, xi = value_parts(vm, xb)
    v = np.maximum(0.0, p) + np.maximum(0.0, xi)
    return float(v[0]) if single else v


def value_input_grad(vm: ValueModel, x) -> np.ndarray:
    """∇ₓV through the clamps (zero where a raw output is nonpositive)."""
    xb, single = _rows(x)
    if isinstance(vm, QuadraticValue):
        g = xb @ (vm.P + vm.P.T)
    else:
        g = np.zeros_like(xb)
        for net in (vm.net_p, vm.net_xi):
            if net is None:
                continue
            y, cache = forward_with_cache(net, xb)
            _, gx = mlp_backward(net, xb, (y > 0.0).astype(float), cache)
            g = g + gx
    return g[0] if single else g


# -------------------------
# Regression
# -------------------------
@dataclass
class RegressionFit:
    net: Mlp
    lr: float
    lr_decay: float
    mse: float
    curve: List[float] = field(default_factory=list)


def _constant_net(layer_sizes: List[int], seed: int, c: float) -> Mlp:
    net = init_mlp(layer_sizes, seed)
    W, b = layers(net)[-1]
    W[...] = 0.0
    b[...] = c
    return net


def _train_cell(X: np.ndarray, y: np.ndarray, cfg: TrainConfig, seed: int, lr: float, decay: float,
                desc: str) -> RegressionFit:
    mu = float(np.mean(y))
    sd = float(np.std(y)) or 1.0
    ys = ((y - mu) / sd)[:, None]
    sizes = [X.shape[1], *cfg.hidden, 1]

    def mse(net: Mlp, idx: np.ndarray):
        xb = X[idx]
        pred, cache = forward_with_cache(net, xb)
        r = pred - ys[idx]
        g, _ = mlp_backward(net, xb, 2.0 * r / len(idx), cache)
        return float(np.mean(r * r)), g

    res = train_loop(init_mlp(sizes, seed), len(X), mse, cfg, seed, lr=lr, lr_decay=decay, desc=desc)
    net = fold_output_affine(res.net, sd, mu)
    err = mlp_forward(net, X)[:, 0] - y
    return RegressionFit(net=net, lr=lr, lr_decay=decay, mse=float(np.mean(err * err)), curve=res.curve)


def _train_cell_star(args) -> RegressionFit:
    return _train_cell(*args)


def fit_regression(X: np.ndarray, y: np.ndarray, cfg: TrainConfig, seed: int, workers: int = 1,
                   desc: str = "fit") -> RegressionFit:
    """Grid search over (lr, decay) cells; the lowest final training MSE wins."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) == 0:
        raise ContractViolation(f"{desc}: empty dataset")
    if not np.all(np.isfinite(y)):
        raise TrainingFailure(f"{desc}: non-finite regression targets")
    sizes = [X.shape[1], *cfg.hidden, 1]
    if np.ptp(y) == 0.0:
        # constant target is representable exactly
        return RegressionFit(net=_constant_net(sizes, seed, float(y[0])), lr=cfg.lr, lr_decay=cfg.lr_decay, mse=0.0)

    cells = cfg.cells()
    jobs = [(X, y, cfg, seed, lr, d, f"{desc} lr={lr:g} decay={d:g}") for lr, d in cells]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(_train_cell_star, jobs))
    else:
        fits = [_train_cell_star(j) for j in jobs]
    for f in fits:
        logger.debug("%s: lr=%g decay=%g mse=%.6g", desc, f.lr, f.lr_decay, f.mse)
    best = min(fits, key=lambda f: f.mse)
    logger.info("%s: best cell lr=%g decay=%g mse=%.6g (%d cells)", desc, best.lr, best.lr_decay, best.mse, len(fits))
    return best


@dataclass
class ValueFit:
    value: NetworkValue
    fits: Dict[str, RegressionFit]


def fit_value(states, V_p, V_xi, train_cfg: TrainConfig, seed: int, workers: int = 1) -> ValueFit:
    """
    Regress both value parts. The penalty network is skipped when every
    penalty target is zero (unconstrained problems).
    """
    states = np.asarray(states, dtype=float)
    V_p = np.asarray(V_p, dtype=float)
    V_xi = np.asarray(V_xi, dtype=float)
    if states.ndim != 2 or len(states) == 0 or len(V_p) != len(states) or len(V_xi) != len(states):
        raise ContractViolation("value dataset must be a nonempty (n, n_x) state array with matching targets")
    fits = {"p": fit_regression(states, V_p, train_cfg, seed, workers, desc="value_p")}
    if np.any(V_xi != 0.0):
        fits["xi"] = fit_regression(states, V_xi, train_cfg, seed + 1, workers, desc="value_xi")
    vm = NetworkValue(net_p=fits["p"].net, net_xi=fits["xi"].net if "xi" in fits else None)
    return ValueFit(value=vm, fits=fits)


def estimate_eps_V(vm: ValueModel, states, V) -> Tuple[float, float]:
    """(max |V̂ − V|, max |V̂ − V| / (|V| + 1)) over the given states."""
    V = np.asarray(V, dtype=float)
    if len(V) == 0:
        raise ContractViolation("cannot estimate an error bound on an empty dataset")
    err = np.abs(value_eval(vm, np.asarray(states, dtype=float)) - V)
    return float(np.max(err)), float(np.max(err / (np.abs(V) + 1.0)))


# -------------------------
# Persistence
# -------------------------
def save_value_model(vm: ValueModel, directory: Path, meta: Dict[str, Any]) -> List[Path]:
    directory = Path(directory)
    if isinstance(vm, QuadraticValue):
        desc = {"kind": "quadratic", "P": vm.P.tolist(), **meta}
        return [write_json(directory / "value.json", desc)]
    paths = [write_json(directory / "net_p.json", mlp_to_json(vm.net_p))]
    if vm.net_xi is not None:
        paths.append(write_json(directory / "net_xi.json", mlp_to_json(vm.net_xi)))
    desc = {
        "kind": "network",
        "combine": "max(0, net_p) + max(0, net_xi)",
        "has_xi": vm.net_xi is not None,
        **meta,
    }
    paths.append(write_json(directory / "value.json", desc))
    return paths


def load_value_model(directory: Path) -> ValueModel:
    directory = Path(directory)
    desc = read_json(directory / "value.json")
    if desc["kind"] == "quadratic":
        return QuadraticValue(np.asarray(desc["P"], dtype=float))
    net_p = mlp_from_json(read_json(directory / "net_p.json"))
    net_xi = mlp_from_json(read_json(directory / "net_xi.json")) if desc.get("has_xi") else None
    return NetworkValue(net_p=net_p, net_xi=net_xi)
