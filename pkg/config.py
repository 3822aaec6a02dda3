# config.py
"""
Configuration models for experiments, solver, training and evaluation.

Everything a run depends on is a pydantic model so it can be read from JSON,
overridden from the command line, and hashed for provenance. Two presets
ship with the tool: ``quad1d`` (the set-valued scalar example) and
``unicycle`` (2D obstacle avoidance).
"""

import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from errors import ContractViolation

Matrix = List[List[float]]


def _is_psd(m: Matrix, strict: bool = False) -> bool:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    eig = np.linalg.eigvalsh(0.5 * (a + a.T))
    return bool(np.all(eig > 0.0)) if strict else bool(np.all(eig >= -1e-12))


# -------------------------
# Problem
# -------------------------
class PolytopeConstraint(BaseModel):
    kind: Literal["polytope"] = "polytope"
    H_x: Matrix

    @field_validator("H_x")
    @classmethod
    def _rows_consistent(cls, v: Matrix) -> Matrix:
        if not v or len({len(r) for r in v}) != 1:
            raise ValueError("H_x must be a nonempty matrix with rows of equal length")
        return v


class ObstacleConstraint(BaseModel):
    kind: Literal["obstacle"] = "obstacle"
    radius: float = Field(gt=0)


ConstraintConfig = Annotated[Union[PolytopeConstraint, ObstacleConstraint], Field(discriminator="kind")]


class TerminalConfig(BaseModel):
    P: Matrix
    h_f: float = Field(gt=0)

    @field_validator("P")
    @classmethod
    def _pd(cls, v: Matrix) -> Matrix:
        if not _is_psd(v, strict=True):
            raise ValueError("terminal P must be symmetric positive definite")
        return v


class ProblemConfig(BaseModel):
    model: str
    N: int = Field(ge=1)
    Q: Matrix
    R: Matrix
    Q_N: Matrix
    rho: float = Field(default=1.0, gt=0)
    eta: float = Field(default=1.0, gt=0, le=1)
    constraint: Optional[ConstraintConfig] = None
    terminal: Optional[TerminalConfig] = None

    @field_validator("Q", "R", "Q_N")
    @classmethod
    def _psd(cls, v: Matrix) -> Matrix:
        if not _is_psd(v):
            raise ValueError("weight matrices must be square and positive semidefinite")
        return v

    @model_validator(mode="after")
    def _terminal_needs_polytope(self) -> "ProblemConfig":
        if self.terminal is not None and not isinstance(self.constraint, PolytopeConstraint):
            raise ValueError("a terminal set requires polytope state constraints")
        return self


# -------------------------
# Solver / training / evaluation
# -------------------------
class SolverConfig(BaseModel):
    restarts: int = Field(default=20, ge=1)
    iterations: int = Field(default=400, ge=1)
    step: float = Field(default=0.1, gt=0)
    step_decay: float = Field(default=0.995, gt=0, le=1)
    tol: float = Field(default=1e-10, ge=0)
    tie_tol: float = Field(default=1e-3, ge=0)
    init: Literal["box", "symmetric_state"] = "box"


class TrainConfig(BaseModel):
    hidden: List[int] = Field(default_factory=lambda: [128, 128, 128])
    epochs: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    lr_decay: float = Field(default=0.999, gt=0, le=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # (lr, decay) grid; a cell per pair, best final training loss wins
    grid_lr: Optional[List[float]] = None
    grid_decay: Optional[List[float]] = None

    def cells(self) -> List[Tuple[float, float]]:
        lrs = self.grid_lr or [self.lr]
        decays = self.grid_decay or [self.lr_decay]
        return [(lr, d) for lr in lrs for d in decays]


LR_GRID = [5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2]
DECAY_GRID = [0.9995, 0.999, 0.995, 0.99]


class SuiteConfig(BaseModel):
    n_trajectories: int = Field(default=500, ge=1)
    T: int = Field(default=100, ge=1)
    start_lower: List[float]
    start_upper: List[float]
    pistar_grid: int = Field(default=100, ge=2)
    reject_violating_starts: bool = True

    @model_validator(mode="after")
    def _box(self) -> "SuiteConfig":
        if len(self.start_lower) != len(self.start_upper) or any(
            lo > hi for lo, hi in zip(self.start_lower, self.start_upper)
        ):
            raise ValueError("start box must be nonempty")
        return self


class IssConfig(BaseModel):
    target_coords: List[int]
    neighborhood: float = Field(default=0.05, gt=0)
    starts: List[List[float]]
    T: int = Field(default=100, ge=1)


class ConsistencyConfig(BaseModel):
    ns_list: List[int] = Field(default_factory=lambda: [50, 10000])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    intervals: List[Tuple[float, float]] = Field(default_factory=lambda: [(-1.0, 1.0), (0.0, 1.0)])
    test_points: int = Field(default=401, ge=2)


# -------------------------
# Sampling plans
# -------------------------
class UniformBox(BaseModel):
    kind: Literal["uniform_box"] = "uniform_box"
    lower: List[float]
    upper: List[float]
    n: int = Field(ge=1)

    @model_validator(mode="after")
    def _nonempty(self) -> "UniformBox":
        if len(self.lower) != len(self.upper) or any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("uniform box bounds must be nonempty")
        return self


class Grid2D(BaseModel):
    kind: Literal["grid2d"] = "grid2d"
    x1_range: Tuple[float, float]
    x1_count: int = Field(ge=1)
    x2_range: Tuple[float, float]
    x2_count: int = Field(ge=1)

    @model_validator(mode="after")
    def _ranges(self) -> "Grid2D":
        if self.x1_range[0] > self.x1_range[1] or self.x2_range[0] > self.x2_range[1]:
            raise ValueError("grid ranges must be nonempty")
        return self


LeafPlan = Annotated[Union[UniformBox, Grid2D], Field(discriminator="kind")]


class Composite(BaseModel):
    kind: Literal["composite"] = "composite"
    parts: List[LeafPlan] = Field(min_length=1)


SamplingPlan = Annotated[Union[UniformBox, Grid2D, Composite], Field(discriminator="kind")]


# -------------------------
# Experiment / run
# -------------------------
class ExperimentConfig(BaseModel):
    name: str
    problem: ProblemConfig
    solver: SolverConfig = Field(default_factory=SolverConfig)
    plan: SamplingPlan
    value_train: TrainConfig = Field(default_factory=TrainConfig)
    policy_train: TrainConfig = Field(default_factory=TrainConfig)
    # closed-form value xᵀPx; when set, fit-value may skip training
    exact_value: Optional[Matrix] = None
    suite: SuiteConfig
    iss: IssConfig
    consistency: Optional[ConsistencyConfig] = None
    eps_grid: int = Field(default=1000, ge=2)
    report_points: int = Field(default=401, ge=2)


class RunConfig(BaseModel):
    experiment: ExperimentConfig
    workdir: Path
    seed: int
    workers: int = Field(default=1, ge=1)

    @property
    def dataset_dir(self) -> Path:
        return self.workdir / "data"

    @property
    def value_dir(self) -> Path:
        return self.workdir / "value"

    def policy_dir(self, method: str) -> Path:
        return self.workdir / f"policy_{method}"

    @property
    def reports_dir(self) -> Path:
        return self.workdir / "reports"

    def stage_dir(self, stage: str) -> Path:
        return self.workdir / stage


# -------------------------
# Presets
# -------------------------
def _quad1d() -> ExperimentConfig:
    return ExperimentConfig(
        name="quad1d",
        problem=ProblemConfig(model="quad1d", N=1, Q=[[1.0]], R=[[0.0]], Q_N=[[1.0]], rho=1.0, eta=1.0),
        solver=SolverConfig(init="symmetric_state"),
        plan=UniformBox(lower=[-1.0], upper=[1.0], n=10000),
        value_train=TrainConfig(grid_lr=None, grid_decay=None),
        policy_train=TrainConfig(hidden=[2], lr=1e-2, lr_decay=0.999),
        exact_value=[[1.0]],
        suite=SuiteConfig(n_trajectories=100, T=20, start_lower=[-1.0], start_upper=[1.0], pistar_grid=1000),
        iss=IssConfig(target_coords=[0], starts=[[-1.0], [-0.9], [-0.5], [0.5], [0.9], [1.0]]),
        consistency=ConsistencyConfig(),
    )


def _unicycle() -> ExperimentConfig:
    return ExperimentConfig(
        name="unicycle",
        problem=ProblemConfig(
            model="unicycle",
            N=20,
            Q=[[0.0, 0.0], [0.0, 1.0]],
            R=[[5.0]],
            Q_N=[[0.0, 0.0], [0.0, 100.0]],
            rho=15000.0,
            eta=0.01,
            constraint=ObstacleConstraint(radius=0.5),
        ),
        # N = 20 needs a longer, slower-decaying run than the generic defaults
        solver=SolverConfig(iterations=1500, step_decay=0.999),
        plan=Composite(
            parts=[
                Grid2D(x1_range=(-2.0, 2.0), x1_count=41, x2_range=(-1.5, 1.5), x2_count=41),
                Grid2D(x1_range=(-1.5, 1.5), x1_count=51, x2_range=(-0.5, 0.5), x2_count=31),
            ]
        ),
        value_train=TrainConfig(grid_lr=LR_GRID, grid_decay=DECAY_GRID),
        policy_train=TrainConfig(grid_lr=LR_GRID, grid_decay=DECAY_GRID),
        suite=SuiteConfig(start_lower=[-1.0, -0.7], start_upper=[0.0, 0.7]),
        iss=IssConfig(
            target_coords=[1],
            starts=[[-1.0, float(v)] for v in np.linspace(-0.7, 0.7, 16)],
        ),
        eps_grid=100,
    )


EXPERIMENTS = {"quad1d": _quad1d, "unicycle": _unicycle}


def load_experiment(tag_or_path: str) -> ExperimentConfig:
    if tag_or_path in EXPERIMENTS:
        return EXPERIMENTS[tag_or_path]()
    path = Path(tag_or_path)
    if not path.exists():
        raise ContractViolation(f"Unknown experiment '{tag_or_path}' (not a preset, not a file)")
    try:
        return ExperimentConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (ValidationError, json.JSONDecodeError) as e:
        raise ContractViolation(f"Invalid experiment config {path}: {e}")


def with_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """
    Apply flat dotted-path overrides (``{"solver.restarts": 5}``) and revalidate.
    """
    if not overrides:
        return cfg
    raw = cfg.model_dump(mode="json")
    for dotted, value in overrides.items():
        node = raw
        keys = dotted.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ContractViolation(f"Override path '{dotted}' does not name a config section")
            node = node[k]
        node[keys[-1]] = value
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ContractViolation(f"Invalid override(s) {sorted(overrides)}: {e}")

