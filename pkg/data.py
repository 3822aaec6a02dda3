# data.py
"""
State sampling, SCMPC labeling, and dataset persistence.

Each record carries one solver draw (the input the solver happened to pick
among equally good optima) together with the value and its performance /
penalty split. Failed solves stay in the dataset as flagged rows.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from artifacts import read_csv, write_csv, write_json
from config import Composite, Grid2D, ProblemConfig, SamplingPlan, SolverConfig, UniformBox
from errors import ContractViolation, SolverFailure
from progress import progress
from scmpc import ScmpcProblem, build_problem, solve_scmpc

logger = logging.getLogger(__name__)

FLAG_SOLVER_FAILURE = "solver_failure"
CHUNK = 64


@dataclass
class DatasetRecord:
    x: np.ndarray
    u_mpc: np.ndarray
    V: float
    V_p: float
    V_xi: float
    solver_seed: int
    spread: float
    flag: str = ""


# -------------------------
# Sampling
# -------------------------
def _grid2d(plan: Grid2D) -> np.ndarray:
    x1 = np.linspace(plan.x1_range[0], plan.x1_range[1], plan.x1_count)
    x2 = np.linspace(plan.x2_range[0], plan.x2_range[1], plan.x2_count)
    a, b = np.meshgrid(x1, x2, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def _uniform(plan: UniformBox, rng: np.random.Generator) -> np.ndarray:
    lo = np.asarray(plan.lower, dtype=float)
    hi = np.asarray(plan.upper, dtype=float)
    return rng.uniform(lo, hi, size=(plan.n, len(lo)))


def sample_states(plan: SamplingPlan, seed: int) -> np.ndarray:
    """Deterministic in seed. Grids enumerate x1-major; composites concatenate their parts."""
    if isinstance(plan, UniformBox):
        return _uniform(plan, np.random.default_rng(seed))
    if isinstance(plan, Grid2D):
        return _grid2d(plan)
    if isinstance(plan, Composite):
        children = np.random.SeedSequence(seed).spawn(len(plan.parts))
        parts = [sample_states(p, int(c.generate_state(1)[0])) for p, c in zip(plan.parts, children)]
        if len({p.shape[1] for p in parts}) != 1:
            raise ContractViolation("composite plan parts disagree on the state dimension")
        return np.concatenate(parts, axis=0)
    raise ContractViolation(f"unknown sampling plan {type(plan).__name__}")


def record_seed(seed: int, j: int) -> int:
    """Solver seed of record j; depends only on (seed, j)."""
    return int(np.random.SeedSequence([seed, j]).generate_state(1)[0])


# -------------------------
# Labeling
# -------------------------
def _label(problem: ScmpcProblem, x: np.ndarray, solver_cfg: SolverConfig, s: int) -> DatasetRecord:
    try:
        sol = solve_scmpc(problem, x, solver_cfg, s)
    except SolverFailure as e:
        logger.warning("record at x=%s flagged: %s", x.tolist(), e)
        nan = float("nan")
        return DatasetRecord(x, np.full(problem.model.n_u, nan), nan, nan, nan, s, nan, FLAG_SOLVER_FAILURE)
    return DatasetRecord(x, sol.u_seq[0].copy(), sol.V, sol.V_p, sol.V_xi, s, sol.value_spread)


def _label_chunk(args) -> List[DatasetRecord]:
    problem_json, solver_json, xs, seeds = args
    problem = build_problem(ProblemConfig.model_validate(problem_json))
    solver_cfg = SolverConfig.model_validate(solver_json)
    return [_label(problem, x, solver_cfg, s) for x, s in zip(xs, seeds)]


def generate_dataset(problem_cfg: ProblemConfig, plan: SamplingPlan, solver_cfg: SolverConfig, seed: int,
                     workers: int = 1, labels_per_state: int = 1) -> List[DatasetRecord]:
    """
    One SCMPC solve per state in plan order. With labels_per_state > 1 every
    state is repeated and each copy gets its own solver draw.
    """
    states = sample_states(plan, seed)
    if labels_per_state > 1:
        states = np.repeat(states, labels_per_state, axis=0)
    seeds = [record_seed(seed, j) for j in range(len(states))]
    problem = build_problem(problem_cfg)
    if states.shape[1] != problem.model.n_x:
        raise ContractViolation(f"plan yields {states.shape[1]}-dimensional states, model has n_x = {problem.model.n_x}")

    if workers > 1:
        jobs = [
            (problem_cfg.model_dump(mode="json"), solver_cfg.model_dump(mode="json"), states[i:i + CHUNK], seeds[i:i + CHUNK])
            for i in range(0, len(states), CHUNK)
        ]
        records: List[DatasetRecord] = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in progress(pool.map(_label_chunk, jobs), total=len(jobs), desc="gen-data"):
                records.extend(chunk)
    else:
        records = [
            _label(problem, x, solver_cfg, s)
            for x, s in progress(zip(states, seeds), total=len(states), desc="gen-data")
        ]
    flagged = sum(1 for r in records if r.flag)
    logger.info("labeled %d states (%d flagged)", len(records), flagged)
    return records


# -------------------------
# Persistence
# -------------------------
def dataset_header(n_x: int, n_u: int) -> List[str]:
    return [*[f"x{i}" for i in range(n_x)], *[f"u{i}" for i in range(n_u)], "V", "V_p", "V_xi", "solver_seed",
            "spread", "flag"]


def _json_float(v: float) -> Optional[float]:
    # flagged rows carry NaN; JSON has no NaN
    return float(v) if math.isfinite(v) else None


def _row(r: DatasetRecord) -> List[Any]:
    return [*r.x.tolist(), *r.u_mpc.tolist(), r.V, r.V_p, r.V_xi, r.solver_seed, r.spread, r.flag]


def write_dataset(records: Sequence[DatasetRecord], directory: Path, provenance: str) -> List[Path]:
    if not records:
        raise ContractViolation("refusing to write an empty dataset")
    directory = Path(directory)
    n_x, n_u = len(records[0].x), len(records[0].u_mpc)
    header = dataset_header(n_x, n_u)
    csv_path = write_csv(directory / "dataset.csv", header, (_row(r) for r in records))
    mirror = {
        "provenance": provenance,
        "n_x": n_x,
        "n_u": n_u,
        "records": [
            {
                "x": r.x.tolist(), "u_mpc": [_json_float(u) for u in r.u_mpc], "V": _json_float(r.V),
                "V_p": _json_float(r.V_p), "V_xi": _json_float(r.V_xi), "solver_seed": r.solver_seed,
                "spread": _json_float(r.spread), "flag": r.flag,
            }
            for r in records
        ],
    }
    return [csv_path, write_json(directory / "dataset.json", mirror)]


def read_dataset(path: Path) -> List[DatasetRecord]:
    header, rows = read_csv(path)
    n_x = sum(1 for h in header if h.startswith("x"))
    n_u = sum(1 for h in header if h.startswith("u"))
    if header != dataset_header(n_x, n_u):
        raise ContractViolation(f"{path}: unexpected dataset header {header}")
    out = []
    for row in rows:
        vals = row[:n_x + n_u + 3]
        out.append(DatasetRecord(
            x=np.array([float(v) for v in vals[:n_x]]),
            u_mpc=np.array([float(v) for v in vals[n_x:n_x + n_u]]),
            V=float(vals[n_x + n_u]),
            V_p=float(vals[n_x + n_u + 1]),
            V_xi=float(vals[n_x + n_u + 2]),
            solver_seed=int(row[n_x + n_u + 3]),
            spread=float(row[n_x + n_u + 4]),
            flag=row[n_x + n_u + 5],
        ))
    return out


def dataset_arrays(records: Sequence[DatasetRecord]) -> Dict[str, np.ndarray]:
    """Stacked arrays of the unflagged records."""
    ok = [r for r in records if not r.flag]
    if not ok:
        raise ContractViolation("dataset has no usable (unflagged) records")
    return {
        "x": np.array([r.x for r in ok]),
        "u": np.array([r.u_mpc for r in ok]),
        "V": np.array([r.V for r in ok]),
        "V_p": np.array([r.V_p for r in ok]),
        "V_xi": np.array([r.V_xi for r in ok]),
    }


def count_flagged(records: Sequence[DatasetRecord]) -> int:
    return sum(1 for r in records if r.flag)

