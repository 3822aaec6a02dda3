# simulate.py
"""
Closed-loop rollouts, the evaluation suite, and the 1D consistency experiment.

A policy is any callable mapping a state (n_x,) to an input (n_u,). Adapters
wrap trained networks, the gridded minimizer of the look-ahead loss and the
SCMPC itself.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from artifacts import write_csv, write_json
from config import ConsistencyConfig, ExperimentConfig, SuiteConfig, UniformBox
from data import generate_dataset
from dynamics import SystemModel, step
from errors import ContractViolation
from policyfit import PolicyModel, grid_losses, policy_eval, set_distance_1d, train_policy_bc, train_policy_il
from progress import progress
from scmpc import ScmpcProblem, build_problem, constraint_violated, stage_cost
from valuefit import ValueModel, value_parts

logger = logging.getLogger(__name__)

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass
class TrajectoryRecord:
    x0: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    p_t: float
    p_c: float
    violations: int
    step_times: np.ndarray = field(repr=False)


@dataclass
class ClosedLoopReport:
    policy: str
    trajectories: List[TrajectoryRecord]

    @property
    def p_t(self) -> float:
        return float(np.mean([t.p_t for t in self.trajectories]))

    @property
    def p_c(self) -> float:
        return float(np.mean([t.p_c for t in self.trajectories]))

    @property
    def perf(self) -> float:
        return float(np.mean([t.p_t + t.p_c for t in self.trajectories]))

    @property
    def violations(self) -> int:
        return int(sum(t.violations for t in self.trajectories))

    @property
    def eval_time(self) -> float:
        """Median wall time of one policy call over the suite."""
        return float(np.median(np.concatenate([t.step_times for t in self.trajectories])))

    def aggregates(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "perf": self.perf,
            "p_t": self.p_t,
            "p_c": self.p_c,
            "violations": self.violations,
            "eval_time": self.eval_time,
            "n_trajectories": len(self.trajectories),
        }


# -------------------------
# Policy adapters
# -------------------------
def nn_policy(pm: PolicyModel) -> Policy:
    return lambda x: policy_eval(pm, x)


def pi_star_grid(x, value: ValueModel, model: SystemModel, Q, R, n_grid: int) -> np.ndarray:
    """Minimizer of the look-ahead loss over n_grid inputs; ties go to the smaller input."""
    grid, losses = grid_losses(x, value, model, Q, R, n_grid)
    return np.array([grid[int(np.argmin(losses[0]))]])


def grid_policy(value: ValueModel, model: SystemModel, Q, R, n_grid: int) -> Policy:
    return lambda x: pi_star_grid(x, value, model, Q, R, n_grid)


# -------------------------
# Rollouts
# -------------------------
def closed_loop(policy: Policy, problem: ScmpcProblem, x0, T: int,
                value_for_pc: Optional[ValueModel] = None) -> TrajectoryRecord:
    """
    u(k) = policy(x(k)), x(k+1) = f(x(k), u(k)) for k < T. Costs and violations
    are accumulated over x(0)..x(T−1).
    """
    if T < 1:
        raise ContractViolation("closed-loop horizon T must be >= 1")
    model = problem.model
    x = np.asarray(x0, dtype=float)
    if x.shape != (model.n_x,):
        raise ContractViolation(f"x0 must have length {model.n_x}")
    states = np.empty((T + 1, model.n_x))
    inputs = np.empty((T, model.n_u))
    times = np.empty(T)
    states[0] = x
    for k in range(T):
        t0 = time.perf_counter()
        u = np.asarray(policy(states[k]), dtype=float).reshape(model.n_u)
        times[k] = time.perf_counter() - t0
        if not np.all(np.isfinite(u)):
            raise ContractViolation(f"policy returned a non-finite input {u.tolist()} at step {k}")
        inputs[k] = u
        states[k + 1] = step(model, states[k], u)

    visited = states[:-1]
    p_t = float(np.sum(stage_cost(problem, visited, inputs)))
    p_c = 0.0
    if value_for_pc is not None:
        _, xi = value_parts(value_for_pc, visited)
        p_c = float(np.sum(np.maximum(0.0, xi)))
    violations = int(np.sum(constraint_violated(problem, visited)))
    return TrajectoryRecord(states[0].copy(), states, inputs, p_t, p_c, violations, times)


def sample_starts(problem: ScmpcProblem, suite: SuiteConfig, seed: int) -> np.ndarray:
    """Uniform starts in the suite box; states violating the constraints are redrawn."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(suite.start_lower, dtype=float)
    hi = np.asarray(suite.start_upper, dtype=float)
    starts = []
    while len(starts) < suite.n_trajectories:
        x = rng.uniform(lo, hi)
        if suite.reject_violating_starts and bool(constraint_violated(problem, x)):
            continue
        starts.append(x)
    return np.array(starts)


def evaluate_suite(policy: Policy, problem: ScmpcProblem, value: Optional[ValueModel], suite_cfg: SuiteConfig,
                   seed: int, name: str = "policy") -> ClosedLoopReport:
    starts = sample_starts(problem, suite_cfg, seed)
    records = [
        closed_loop(policy, problem, x0, suite_cfg.T, value)
        for x0 in progress(starts, desc=f"suite {name}", leave=False)
    ]
    report = ClosedLoopReport(name, records)
    logger.info("suite %s: perf=%.4g violations=%d eval_time=%.3g s", name, report.perf, report.violations,
                report.eval_time)
    return report


def trajectory_rows(report: ClosedLoopReport) -> Tuple[List[str], List[List[Any]]]:
    n_x = report.trajectories[0].states.shape[1] if report.trajectories else 0
    header = ["policy", "index", *[f"x0_{i}" for i in range(n_x)], "p_t", "p_c", "violations"]
    rows = [[report.policy, j, *t.x0.tolist(), t.p_t, t.p_c, t.violations] for j, t in enumerate(report.trajectories)]
    return header, rows


def state_rows(report: ClosedLoopReport, indices: Optional[Sequence[int]] = None) -> Tuple[List[str], List[List[Any]]]:
    """Per-step states and inputs for selected trajectories (all when indices is None)."""
    if not report.trajectories:
        return ["policy", "index", "k"], []
    n_x = report.trajectories[0].states.shape[1]
    n_u = report.trajectories[0].inputs.shape[1]
    header = ["policy", "index", "k", *[f"x{i}" for i in range(n_x)], *[f"u{i}" for i in range(n_u)]]
    rows = []
    for j in indices if indices is not None else range(len(report.trajectories)):
        t = report.trajectories[j]
        for k, x in enumerate(t.states):
            u = t.inputs[k].tolist() if k < len(t.inputs) else [float("nan")] * n_u
            rows.append([report.policy, j, k, *x.tolist(), *u])
    return header, rows


def save_report(report: ClosedLoopReport, directory: Path, provenance: str) -> List[Path]:
    directory = Path(directory)
    th, tr = trajectory_rows(report)
    sh, sr = state_rows(report)
    return [
        write_json(directory / f"suite_{report.policy}.json", {**report.aggregates(), "provenance": provenance}),
        write_csv(directory / f"trajectories_{report.policy}.csv", th, tr),
        write_csv(directory / f"states_{report.policy}.csv", sh, sr),
    ]


# -------------------------
# 1D consistency experiment
# -------------------------
def bc_limit_distance(a: float, b: float) -> float:
    """E|x| for x ~ U[a, b]: the limit distance of the conditional-mean policy 0 to {x, −x}."""
    if not a < b:
        raise ContractViolation("interval must satisfy a < b")
    return (b * abs(b) - a * abs(a)) / (2.0 * (b - a))


def iss_starts(n: int = 16) -> np.ndarray:
    """Start states on x1 = −1, spread evenly over x2 ∈ [−0.7, 0.7]."""
    return np.column_stack([np.full(n, -1.0), np.linspace(-0.7, 0.7, n)])


def distance_profile(pm: PolicyModel, a: float, b: float, n_points: int) -> Tuple[float, float]:
    xs = np.linspace(a, b, n_points)[:, None]
    d = set_distance_1d(policy_eval(pm, xs)[:, 0], xs[:, 0])
    return float(np.mean(d)), float(np.max(d))


def consistency_experiment(ns_list: Sequence[int], seeds: Sequence[int], exp: ExperimentConfig, value: ValueModel,
                           workers: int = 1, cfg: Optional[ConsistencyConfig] = None) -> List[Dict[str, Any]]:
    """
    For every interval, sample size and seed: label the states with the SCMPC,
    train IL and BC policies, and measure their distance to {x, −x} on a test grid.
    """
    cfg = cfg or exp.consistency or ConsistencyConfig()
    problem = build_problem(exp.problem)
    if problem.model.n_x != 1 or problem.model.n_u != 1:
        raise ContractViolation("the consistency experiment is defined for the scalar example")
    rows: List[Dict[str, Any]] = []
    for a, b in cfg.intervals:
        for n_s in ns_list:
            for s in seeds:
                plan = UniformBox(lower=[a], upper=[b], n=n_s)
                records = generate_dataset(exp.problem, plan, exp.solver, s, workers=workers)
                states = np.array([r.x for r in records])
                labels = np.array([r.u_mpc for r in records])
                il = train_policy_il(states, value, problem.model, problem.Q, problem.R, exp.policy_train, s)
                bc = train_policy_bc(states, labels, (problem.model.u_lower, problem.model.u_upper),
                                     exp.policy_train, s)
                for method, fit in (("il", il), ("bc", bc)):
                    mean, sup = distance_profile(fit.policy, a, b, cfg.test_points)
                    rows.append({"method": method, "a": a, "b": b, "N_s": n_s, "seed": s, "mean": mean, "sup": sup})
                logger.info("consistency [%g, %g] N_s=%d seed=%d: il %.4f bc %.4f", a, b, n_s, s,
                            rows[-2]["mean"], rows[-1]["mean"])
    return rows
