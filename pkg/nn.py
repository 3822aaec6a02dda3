# nn.py
"""
Small numpy neural-network stack: ReLU MLPs with reverse-mode gradients
w.r.t. parameters and inputs, Adam with exponential learning-rate decay,
minibatching, and the box-projection output layer used by policies.

Parameters live in one flat vector. Layer k occupies W_k (n_in × n_out,
row-major) followed by b_k (n_out).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import TrainConfig
from errors import ContractViolation, TrainingFailure
from progress import progress

logger = logging.getLogger(__name__)


@dataclass
class Mlp:
    layer_sizes: List[int]
    params: np.ndarray
    init_seed: int = 0
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ContractViolation("an MLP needs at least input and output widths")
        if self.params.shape != (n_params(self.layer_sizes),):
            raise ContractViolation(
                f"parameter vector has {self.params.shape}, expected ({n_params(self.layer_sizes)},)"
            )

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def with_params(self, params: np.ndarray) -> "Mlp":
        return replace(self, params=params)


def n_params(layer_sizes: List[int]) -> int:
    return sum((n_in + 1) * n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))


def _layers(layer_sizes: List[int], flat: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    out, k = [], 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = flat[k:k + n_in * n_out].reshape(n_in, n_out)
        k += n_in * n_out
        b = flat[k:k + n_out]
        k += n_out
        out.append((W, b))
    return out


def layers(net: Mlp) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(W, b) views into ``net.params``."""
    return _layers(net.layer_sizes, net.params)


def init_mlp(layer_sizes: List[int], seed: int) -> Mlp:
    rng = np.random.default_rng(seed)
    params = np.zeros(n_params(layer_sizes))
    for W, _ in _layers(layer_sizes, params):
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return Mlp(layer_sizes=list(layer_sizes), params=params, init_seed=seed)


# -------------------------
# Forward / backward
# -------------------------
@dataclass
class ForwardCache:
    activations: List[np.ndarray]
    preactivations: List[np.ndarray]


def _as_batch(net: Mlp, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ContractViolation(f"network input must have width {net.n_in}, got {x.shape}")
    return x, single


def forward_with_cache(net: Mlp, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Batch forward pass (x: (B, n_in)) keeping what the backward pass needs."""
    acts, pres = [x], []
    h = x
    ls = layers(net)
    for k, (W, b) in enumerate(ls):
        z = h @ W + b
        pres.append(z)
        h = np.maximum(z, 0.0) if k < len(ls) - 1 else z
        acts.append(h)
    return h, ForwardCache(acts, pres)


def mlp_forward(net: Mlp, x) -> np.ndarray:
    xb, single = _as_batch(net, x)
    y, _ = forward_with_cache(net, xb)
    return y[0] if single else y


def mlp_backward(net: Mlp, x, upstream_grad, cache: Optional[ForwardCache] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of Σ_batch upstream_gradᵀ · net(x) w.r.t. the flat parameters
    and w.r.t. each input row.
    """
    xb, single = _as_batch(net, x)
    delta = np.asarray(upstream_grad, dtype=float)
    if single:
        delta = delta[None, :]
    if cache is None:
        _, cache = forward_with_cache(net, xb)
    grad = np.zeros_like(net.params)
    g_layers = _layers(net.layer_sizes, grad)
    ls = layers(net)
    for k in range(len(ls) - 1, -1, -1):
        W, _ = ls[k]
        gW, gb = g_layers[k]
        gW[...] = cache.activations[k].T @ delta
        gb[...] = delta.sum(axis=0)
        delta = delta @ W.T
        if k > 0:
            # ReLU subgradient: 0 for nonpositive preactivation
            delta = delta * (cache.preactivations[k - 1] > 0.0)
    return grad, (delta[0] if single else delta)


def fold_output_affine(net: Mlp, scale: float, offset: float) -> Mlp:
    """Returns a net computing scale · net(x) + offset."""
    params = net.params.copy()
    W, b = _layers(net.layer_sizes, params)[-1]
    W *= scale
    b[...] = b * scale + offset
    return net.with_params(params)


# -------------------------
# Input projection
# -------------------------
def project_input(u_raw, box: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Clamp to the box; the mask passes gradients where the clamp is inactive."""
    lower, upper = box
    u_raw = np.asarray(u_raw, dtype=float)
    u = np.clip(u_raw, lower, upper)
    mask = ((u_raw >= lower) & (u_raw <= upper)).astype(float)
    return u, mask


# -------------------------
# Adam
# -------------------------
@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 1e-3
    lr_decay: float = 1.0
    epoch: int = 0

    @classmethod
    def fresh(cls, n: int, lr0: float, lr_decay: float = 1.0, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), beta1=beta1, beta2=beta2, eps=eps, lr0=lr0, lr_decay=lr_decay)

    @property
    def lr(self) -> float:
        return self.lr0 * self.lr_decay**self.epoch


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> Tuple[np.ndarray, AdamState]:
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ContractViolation("Adam state, parameters and gradients must have the same shape")
    if not np.all(np.isfinite(grads)):
        raise TrainingFailure(f"non-finite gradient at Adam step {state.t + 1}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


# -------------------------
# Training driver
# -------------------------
def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# (net, batch indices) -> (mean batch loss, gradient of the mean w.r.t. net.params)
LossAndGrad = Callable[[Mlp, np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class TrainResult:
    net: Mlp
    curve: List[float] = field(default_factory=list)
    lr: float = 0.0
    lr_decay: float = 1.0

    @property
    def final_loss(self) -> float:
        return self.curve[-1] if self.curve else float("nan")


def train_loop(net: Mlp, n_samples: int, loss_and_grad: LossAndGrad, cfg: TrainConfig, seed: int,
               lr: Optional[float] = None, lr_decay: Optional[float] = None, desc: str = "train") -> TrainResult:
    lr = cfg.lr if lr is None else lr
    lr_decay = cfg.lr_decay if lr_decay is None else lr_decay
    rng = np.random.default_rng(seed)
    state = AdamState.fresh(net.params.size, lr, lr_decay, cfg.beta1, cfg.beta2, cfg.eps)
    params = net.params.copy()
    curve: List[float] = []
    for epoch in progress(range(cfg.epochs), desc=desc, leave=False):
        state.epoch = epoch
        total = 0.0
        for idx in minibatches(n_samples, cfg.batch_size, rng):
            loss, grad = loss_and_grad(net.with_params(params), idx)
            if not np.isfinite(loss):
                raise TrainingFailure(f"{desc}: non-finite loss in epoch {epoch}")
            params, state = adam_step(state, params, grad)
            total += loss * len(idx)
        curve.append(total / n_samples)
        if epoch % 500 == 0:
            logger.debug("%s epoch %d loss %.6g lr %.3g", desc, epoch, curve[-1], state.lr)
    return TrainResult(net=net.with_params(params), curve=curve, lr=lr, lr_decay=lr_decay)


# -------------------------
# Serialization
# -------------------------
def mlp_to_json(net: Mlp) -> Dict[str, Any]:
    return {
        "layer_sizes": list(net.layer_sizes),
        "activations": {"hidden": net.hidden_activation, "output": net.output_activation},
        "params": [float(p) for p in net.params],
        "init_seed": net.init_seed,
    }


def mlp_from_json(d: Dict[str, Any]) -> Mlp:
    acts = d.get("activations", {})
    if acts.get("hidden", "relu") != "relu" or acts.get("output", "identity") != "identity":
        raise ContractViolation(f"unsupported activations {acts}")
    return Mlp(
        layer_sizes=[int(n) for n in d["layer_sizes"]],
        params=np.asarray(d["params"], dtype=float),
        init_seed=int(d.get("init_seed", 0)),
    )
