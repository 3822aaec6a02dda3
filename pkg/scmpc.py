# scmpc.py
"""
Soft-constrained MPC (SCMPC).

The problem is transcribed by single shooting over the input sequence. For a
fixed trajectory the slack variables have a closed-form optimum (1-norm exact
penalty), so they are eliminated from the decision vector and only box
constraints on the inputs remain. Those are handled exactly by projected,
Adam-scaled gradient descent run from several restarts at once. Among the
restarts that tie with the best value one is picked at random: that pick is
the solver-selection randomness of a set-valued MPC policy.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np

from config import ObstacleConstraint, PolytopeConstraint, ProblemConfig, SolverConfig
from dynamics import SystemModel, get_model, jacobians, step
from errors import ContractViolation, SolverFailure, UnsupportedConfiguration

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# -------------------------
# Problem data
# -------------------------
@dataclass(frozen=True)
class PolytopeRows:
    H_x: np.ndarray


@dataclass(frozen=True)
class ObstacleCircle:
    radius: float


@dataclass(frozen=True)
class TerminalSet:
    P: np.ndarray
    h_f: float


StateConstraints = Union[PolytopeRows, ObstacleCircle]


@dataclass(frozen=True)
class ScmpcProblem:
    model: SystemModel
    N: int
    Q: np.ndarray
    R: np.ndarray
    Q_N: np.ndarray
    rho: float
    eta: float
    state_constraints: Optional[StateConstraints] = None
    terminal: Optional[TerminalSet] = None
    # per-row support of the terminal ellipsoid, filled in __post_init__
    supports: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n_x, n_u = self.model.n_x, self.model.n_u
        if self.N < 1:
            raise ContractViolation("horizon N must be >= 1")
        if not self.rho > 0:
            raise ContractViolation("penalty scale rho must be > 0")
        if not 0 < self.eta <= 1:
            raise ContractViolation("tightening eta must lie in (0, 1]")
        for name, M, n in (("Q", self.Q, n_x), ("R", self.R, n_u), ("Q_N", self.Q_N, n_x)):
            if M.shape != (n, n):
                raise ContractViolation(f"{name} must be {n}x{n}, got {M.shape}")
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
                raise ContractViolation(f"{name} must be positive semidefinite")
        sc = self.state_constraints
        if isinstance(sc, PolytopeRows) and (sc.H_x.ndim != 2 or sc.H_x.shape[1] != n_x):
            raise ContractViolation(f"H_x must have {n_x} columns, got {sc.H_x.shape}")
        if isinstance(sc, ObstacleCircle) and not sc.radius > 0:
            raise ContractViolation("obstacle radius must be > 0")
        supports = np.zeros(0)
        if self.terminal is not None:
            if not isinstance(sc, PolytopeRows):
                raise UnsupportedConfiguration("terminal sets require polytope state constraints")
            if self.terminal.P.shape != (n_x, n_x):
                raise ContractViolation(f"terminal P must be {n_x}x{n_x}")
            supports = np.array([ellipsoid_support(self.terminal.P, self.terminal.h_f, a) for a in sc.H_x])
        object.__setattr__(self, "supports", supports)

    @property
    def m_x(self) -> int:
        sc = self.state_constraints
        if isinstance(sc, PolytopeRows):
            return sc.H_x.shape[0]
        if isinstance(sc, ObstacleCircle):
            return 1
        return 0


def build_problem(cfg: ProblemConfig) -> ScmpcProblem:
    model = get_model(cfg.model)
    sc: Optional[StateConstraints] = None
    if isinstance(cfg.constraint, PolytopeConstraint):
        sc = PolytopeRows(np.asarray(cfg.constraint.H_x, dtype=float))
    elif isinstance(cfg.constraint, ObstacleConstraint):
        sc = ObstacleCircle(float(cfg.constraint.radius))
    terminal = None
    if cfg.terminal is not None:
        terminal = TerminalSet(np.asarray(cfg.terminal.P, dtype=float), float(cfg.terminal.h_f))
    return ScmpcProblem(
        model=model,
        N=cfg.N,
        Q=np.asarray(cfg.Q, dtype=float),
        R=np.asarray(cfg.R, dtype=float),
        Q_N=np.asarray(cfg.Q_N, dtype=float),
        rho=float(cfg.rho),
        eta=float(cfg.eta),
        state_constraints=sc,
        terminal=terminal,
    )


@dataclass
class ScmpcSolution:
    u_seq: np.ndarray
    x_traj: np.ndarray
    xi_seq: np.ndarray
    xi_N: np.ndarray
    alpha: float
    V: float
    V_p: float
    V_xi: float
    restarts_used: int
    value_spread: float
    iterations: int


# -------------------------
# Building blocks
# -------------------------
def quad_form(x: np.ndarray, M: np.ndarray) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", x, M, x)


def stage_cost(problem: ScmpcProblem, x, u) -> np.ndarray:
    """ℓ(x, u) = xᵀQx + uᵀRu, batch-capable."""
    return quad_form(np.asarray(x, dtype=float), problem.Q) + quad_form(np.asarray(u, dtype=float), problem.R)


def _as_sequence(model: SystemModel, u_seq) -> np.ndarray:
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.size == 0:
        return u_seq if u_seq.ndim >= 2 and u_seq.shape[-1] == model.n_u else np.zeros((0, model.n_u))
    if u_seq.ndim == 1 and model.n_u == 1:
        u_seq = u_seq[:, None]
    if u_seq.ndim < 2 or u_seq.shape[-1] != model.n_u:
        raise ContractViolation(f"input sequence must have shape (..., N, {model.n_u}), got {u_seq.shape}")
    return u_seq


def rollout(model: SystemModel, x0, u_seq) -> np.ndarray:
    """States x_0..x_N, shape (..., N+1, n_x); batch axes of u_seq broadcast x0."""
    u_seq = _as_sequence(model, u_seq)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1:] != (model.n_x,):
        raise ContractViolation(f"x0 must have trailing dimension {model.n_x}, got {x0.shape}")
    batch = np.broadcast_shapes(x0.shape[:-1], u_seq.shape[:-2])
    x = np.broadcast_to(x0, batch + (model.n_x,))
    xs = [x]
    for i in range(u_seq.shape[-2]):
        x = step(model, x, u_seq[..., i, :])
        xs.append(x)
    return np.stack(xs, axis=-2)


def ellipsoid_support(P, h_f: float, a) -> float:
    """sup over {x | xᵀPx ≤ h_f} of aᵀx = sqrt(h_f · aᵀP⁻¹a)."""
    P = np.asarray(P, dtype=float)
    a = np.asarray(a, dtype=float)
    if not h_f > 0:
        raise ContractViolation("h_f must be > 0")
    if P.ndim != 2 or P.shape[0] != P.shape[1] or not np.allclose(P, P.T):
        raise ContractViolation("P must be a symmetric square matrix")
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ContractViolation("P must be positive definite")
    w = np.linalg.solve(L, a)
    return float(np.sqrt(h_f * (w @ w)))


def terminal_containment(alpha: float, P, h_f: float, H_x, eta: float, xi_N) -> Tuple[bool, np.ndarray]:
    """
    Checks α·X_f ⊆ {x | H_x x ≤ 1(1−η) + ξ_N} row by row.
    Returns (satisfied, margins) with margin_j = 1 − η + ξ_N[j] − α·support_j.
    """
    H_x = np.atleast_2d(np.asarray(H_x, dtype=float))
    xi_N = np.broadcast_to(np.asarray(xi_N, dtype=float), (H_x.shape[0],))
    supports = np.array([ellipsoid_support(P, h_f, a) for a in H_x])
    margins = 1.0 - eta + xi_N - alpha * supports
    return bool(np.all(margins >= -1e-12)), margins


def _residuals(problem: ScmpcProblem, xs: np.ndarray) -> np.ndarray:
    """Constraint residuals of states x_0..x_{N-1}; positive means violated. Shape (..., N, m_x)."""
    x = xs[..., :-1, :]
    sc = problem.state_constraints
    if isinstance(sc, PolytopeRows):
        return x @ sc.H_x.T - (1.0 - problem.eta)
    if isinstance(sc, ObstacleCircle):
        return (sc.radius**2 + problem.eta - np.sum(x**2, axis=-1))[..., None]
    return np.zeros(x.shape[:-1] + (0,))


def _terminal_slack(problem: ScmpcProblem, x_N: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Terminal scaling and slack for final states x_N of shape (..., n_x).
    Returns (alpha, xi_N, d xi_N / d x_N) with shapes (...), (..., m), (..., m, n_x).
    """
    batch = x_N.shape[:-1]
    m = problem.m_x
    if problem.terminal is None:
        return np.ones(batch), np.zeros(batch + (m,)), np.zeros(batch + (m, x_N.shape[-1]))
    P, h_f = problem.terminal.P, problem.terminal.h_f
    alpha_min = np.sqrt(np.maximum(quad_form(x_N, P), 0.0) / h_f)
    xi_N = np.maximum(0.0, alpha_min[..., None] * problem.supports - (1.0 - problem.eta))
    with np.errstate(divide="ignore", invalid="ignore"):
        d_alpha = np.where(alpha_min[..., None] > 0, (x_N @ P) / (h_f * alpha_min[..., None]), 0.0)
    d_xi = (xi_N > 0)[..., None] * problem.supports[:, None] * d_alpha[..., None, :]
    return np.minimum(1.0, alpha_min), xi_N, d_xi


def terminal_scaling(problem: ScmpcProblem, x_N) -> float:
    """Optimal α ∈ [0, 1] for a fixed final state (1.0 without a terminal set)."""
    alpha, _, _ = _terminal_slack(problem, np.asarray(x_N, dtype=float))
    return float(alpha)


def optimal_slacks(x_traj, problem: ScmpcProblem) -> Tuple[np.ndarray, np.ndarray]:
    """
    Slacks minimizing J_ξ for a fixed trajectory x_0..x_N.
    ξ_N covers the terminal containment margins; ξ_i = max(0, r_i − ξ_N).
    """
    xs = np.asarray(x_traj, dtype=float)
    _, xi_N, _ = _terminal_slack(problem, xs[..., -1, :])
    r = _residuals(problem, xs)
    xi_seq = np.maximum(0.0, r - xi_N[..., None, :])
    return xi_seq, xi_N


def _penalty(problem: ScmpcProblem, xi_seq: np.ndarray, xi_N: np.ndarray) -> np.ndarray:
    # ℓ_ξ is the 1-norm and slacks are nonnegative
    return problem.rho * (np.sum(xi_N, axis=-1) + np.sum(xi_N[..., None, :] + xi_seq, axis=(-2, -1)))


def _performance(problem: ScmpcProblem, xs: np.ndarray, u_seq: np.ndarray) -> np.ndarray:
    stages = quad_form(xs[..., :-1, :], problem.Q) + quad_form(u_seq, problem.R)
    return np.sum(stages, axis=-1) + quad_form(xs[..., -1, :], problem.Q_N)


def _check_horizon(problem: ScmpcProblem, u_seq) -> np.ndarray:
    u_seq = _as_sequence(problem.model, u_seq)
    if u_seq.shape[-2] != problem.N:
        raise ContractViolation(f"input sequence has length {u_seq.shape[-2]}, horizon is {problem.N}")
    return u_seq


def scmpc_cost(problem: ScmpcProblem, x0, u_seq):
    """(J_p, J_ξ, J_p + J_ξ) with slacks eliminated analytically. Scalars, or arrays for batched u_seq."""
    u_seq = _check_horizon(problem, u_seq)
    xs = rollout(problem.model, x0, u_seq)
    xi_seq, xi_N = optimal_slacks(xs, problem)
    J_p = _performance(problem, xs, u_seq)
    J_xi = _penalty(problem, xi_seq, xi_N)
    if np.ndim(J_p) == 0:
        return float(J_p), float(J_xi), float(J_p) + float(J_xi)
    return J_p, J_xi, J_p + J_xi


def scmpc_cost_grad(problem: ScmpcProblem, x0, u_seq) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Cost parts and the (sub)gradient of the total cost with respect to u_seq,
    by the adjoint recursion λ_i = ∂J/∂x_i + A_iᵀλ_{i+1}.
    """
    u_seq = _check_horizon(problem, u_seq)
    model = problem.model
    xs = rollout(model, x0, u_seq)
    A, B = jacobians(model, xs[..., :-1, :], u_seq)

    r = _residuals(problem, xs)
    _, xi_N, d_xi_N = _terminal_slack(problem, xs[..., -1, :])
    active = r > xi_N[..., None, :]
    xi_seq = np.maximum(0.0, r - xi_N[..., None, :])
    J_p = _performance(problem, xs, u_seq)
    J_xi = _penalty(problem, xi_seq, xi_N)

    x = xs[..., :-1, :]
    g_x = x @ (problem.Q + problem.Q.T)
    sc = problem.state_constraints
    if isinstance(sc, PolytopeRows):
        g_x = g_x + problem.rho * (active.astype(float) @ sc.H_x)
    elif isinstance(sc, ObstacleCircle):
        g_x = g_x + problem.rho * active.astype(float) * (-2.0 * x)

    lam = xs[..., -1, :] @ (problem.Q_N + problem.Q_N.T)
    if problem.terminal is not None:
        # ∂J/∂ξ_N,j = ρ (1 + #{i : r_ij ≤ ξ_N,j})
        w = problem.rho * (1.0 + np.sum(~active, axis=-2))
        lam = lam + np.einsum("...j,...jn->...n", w, d_xi_N)

    R_sym = problem.R + problem.R.T
    grad = np.empty(np.broadcast_shapes(lam.shape[:-1], u_seq.shape[:-2]) + u_seq.shape[-2:])
    for i in range(problem.N - 1, -1, -1):
        grad[..., i, :] = u_seq[..., i, :] @ R_sym + np.einsum("...xu,...x->...u", B[..., i, :, :], lam)
        lam = g_x[..., i, :] + np.einsum("...xy,...x->...y", A[..., i, :, :], lam)
    return J_p, J_xi, grad


# -------------------------
# Solver
# -------------------------
def _initial_inputs(problem: ScmpcProblem, x0: np.ndarray, cfg: SolverConfig, rng: np.random.Generator) -> np.ndarray:
    model = problem.model
    shape = (cfg.restarts, problem.N, model.n_u)
    if cfg.init == "symmetric_state":
        if model.n_u != model.n_x:
            raise UnsupportedConfiguration("symmetric_state initialization needs n_u == n_x")
        signs = rng.choice([-1.0, 1.0], size=cfg.restarts)
        u0 = signs[:, None, None] * np.broadcast_to(x0, shape)
        return np.clip(u0, model.u_lower, model.u_upper)
    return rng.uniform(model.u_lower, model.u_upper, size=shape)


def solve_scmpc(problem: ScmpcProblem, x0, solver_cfg: SolverConfig, seed: int) -> ScmpcSolution:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.model.n_x,) or not np.all(np.isfinite(x0)):
        raise ContractViolation(f"x0 must be a finite vector of length {problem.model.n_x}")
    rng = np.random.default_rng(seed)
    lo, hi = problem.model.u_lower, problem.model.u_upper

    u = _initial_inputs(problem, x0, solver_cfg, rng)
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    lr = solver_cfg.step
    it = 0
    for it in range(1, solver_cfg.iterations + 1):
        J_p, J_xi, g = scmpc_cost_grad(problem, x0, u)
        ok = np.isfinite(J_p + J_xi)[:, None, None] & np.isfinite(g)
        g = np.where(ok, g, 0.0)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**it)
        v_hat = v / (1.0 - ADAM_BETA2**it)
        u_next = np.clip(u - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), lo, hi)
        delta = np.nanmax(np.abs(u_next - u)) if np.any(np.isfinite(u_next)) else np.inf
        u = u_next
        lr *= solver_cfg.step_decay
        if delta <= solver_cfg.tol:
            break

    J_p, J_xi, total = scmpc_cost(problem, x0, u)
    finite = np.isfinite(total)
    if not np.any(finite):
        raise SolverFailure(f"all {solver_cfg.restarts} restarts diverged at x0={x0.tolist()}")
    best = float(np.min(total[finite]))
    ties = np.flatnonzero(finite & (total <= best + solver_cfg.tie_tol * (1.0 + abs(best))))
    k = int(rng.choice(ties))

    xs = rollout(problem.model, x0, u[k])
    xi_seq, xi_N = optimal_slacks(xs, problem)
    V_p, V_xi = float(J_p[k]), float(J_xi[k])
    logger.debug("scmpc x0=%s V=%.6g (%d ties, %d iterations)", x0.tolist(), V_p + V_xi, len(ties), it)
    return ScmpcSolution(
        u_seq=u[k].copy(),
        x_traj=xs,
        xi_seq=xi_seq,
        xi_N=xi_N,
        alpha=terminal_scaling(problem, xs[-1]),
        V=V_p + V_xi,
        V_p=V_p,
        V_xi=V_xi,
        restarts_used=solver_cfg.restarts,
        value_spread=float(np.max(total[finite]) - np.min(total[finite])),
        iterations=it,
    )


def brute_force_value(problem: ScmpcProblem, x0, n_grid: int = 200) -> Tuple[float, np.ndarray]:
    """Exhaustive input-grid oracle for n_u = 1 and N ≤ 2. Returns (value, u_seq)."""
    model = problem.model
    if model.n_u != 1 or problem.N > 2:
        raise UnsupportedConfiguration("grid oracle supports n_u = 1 and N <= 2 only")
    grid = np.linspace(model.u_lower[0], model.u_upper[0], n_grid)
    mesh = np.stack(np.meshgrid(*([grid] * problem.N), indexing="ij"), axis=-1).reshape(-1, problem.N, 1)
    _, _, total = scmpc_cost(problem, x0, mesh)
    k = int(np.argmin(total))
    return float(total[k]), mesh[k]


def constraint_violated(problem: ScmpcProblem, x) -> np.ndarray:
    """Strict obstacle-interior membership, or H_x x > 1 for any row."""
    x = np.asarray(x, dtype=float)
    sc = problem.state_constraints
    if isinstance(sc, ObstacleCircle):
        return np.sum(x**2, axis=-1) < sc.radius**2
    if isinstance(sc, PolytopeRows):
        return np.any(x @ sc.H_x.T > 1.0, axis=-1)
    return np.zeros(x.shape[:-1], dtype=bool)


def mpc_policy(problem: ScmpcProblem, solver_cfg: SolverConfig, seed: int) -> Callable[[np.ndarray], np.ndarray]:
    """Closed-loop SCMPC: first input of a fresh solve per call, seeds drawn from one stream."""
    seeds = np.random.SeedSequence(seed)

    def policy(x: np.ndarray) -> np.ndarray:
        child = seeds.spawn(1)[0]
        return solve_scmpc(problem, x, solver_cfg, int(child.generate_state(1)[0])).u_seq[0]

    return policy
