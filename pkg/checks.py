# checks.py
"""
Audits of the conditions the learned controller relies on, and closed-loop
stability diagnostics.

Each audit has a registry entry (what it checks, how to read a failure) and
produces an ``AssumptionAudit`` row. Audits that cannot be machine-checked
are carried as documented modeling assumptions.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from artifacts import read_json, write_json
from config import SolverConfig
from errors import ContractViolation, SolverFailure
from policyfit import PolicyModel, loss_mpc, policy_eval
from scmpc import ScmpcProblem, solve_scmpc, stage_cost
from simulate import ClosedLoopReport, TrajectoryRecord
from valuefit import ValueModel

logger = logging.getLogger(__name__)

WIDE_STATE_SCALE = 10.0
ISS_TAIL_FRACTION = 0.2
ISS_MAX_GAIN = 10.0
ISS_RATES = np.linspace(0.5, 0.999, 500)


# ============================
# Audit registry
# ============================
@dataclass
class AuditEntry:
    id: int
    name: str
    priority: int
    checkable: bool
    summary: str
    detail: str


AUDITS: List[AuditEntry] = []


def register_audit(entry: AuditEntry) -> AuditEntry:
    if any(a.name == entry.name for a in AUDITS):
        raise ContractViolation(f"audit '{entry.name}' registered twice")
    AUDITS.append(entry)
    AUDITS.sort(key=lambda a: a.priority)
    return entry


def audit_entry(name: str) -> AuditEntry:
    for a in AUDITS:
        if a.name == name:
            return a
    raise ContractViolation(f"Unknown audit '{name}'")


for _e in [
    AuditEntry(1, "input_constraint", 10, True,
               "Policy outputs stay in the input box.",
               "The projection layer clamps every output; a violation means an unprojected network was shipped."),
    AuditEntry(2, "value_error_bound", 20, True,
               "Value approximation error is bounded on the data.",
               "Finite worst-case absolute and relative error of the value model over the value dataset."),
    AuditEntry(3, "policy_error_bound", 30, True,
               "Policy loss suboptimality is bounded on the data.",
               "Finite worst-case gap between the policy's look-ahead loss and the gridded minimizer."),
    AuditEntry(4, "descent_inequality", 40, True,
               "The policy's look-ahead loss is dominated by the MPC's one-step cost plus error terms.",
               "Per state: L(x, π(x)) ≤ ℓ(x, u_MPC) + V_MPC(f(x, u_MPC)) + ε̂_V + ε̂_π."),
    AuditEntry(5, "iss", 50, True,
               "Closed loop settles into a neighborhood of the target.",
               "Fits an exponential-plus-offset envelope; a diagnostic, not a certificate."),
    AuditEntry(6, "mpc_stabilizes", 90, False,
               "The SCMPC stabilizes the origin on its feasible set.",
               "Modeling assumption, taken from the MPC design; not machine-checked."),
    AuditEntry(7, "minimizer_exists", 95, False,
               "The policy class contains a pointwise minimizer of the look-ahead loss.",
               "Modeling assumption on the network architecture; not machine-checked."),
]:
    register_audit(_e)


@dataclass
class AssumptionAudit:
    assumption: str
    samples: int
    max_violation: float
    tolerance: float
    passed: bool
    notes: str = ""
    skipped: int = 0
    checked: bool = True

    def to_json(self) -> Dict[str, Any]:
        d = asdict(self)
        if not math.isfinite(d["max_violation"]):
            d["max_violation"] = str(d["max_violation"])
        return d


def _audit(name: str, samples: int, max_violation: float, tolerance: float, notes: str = "",
           skipped: int = 0) -> AssumptionAudit:
    audit_entry(name)
    passed = bool(max_violation <= tolerance)
    level = logging.INFO if passed else logging.WARNING
    logger.log(level, "audit %s: %s (max violation %.3g, tol %.3g, %d samples)", name,
               "pass" if passed else "FAIL", max_violation, tolerance, samples)
    return AssumptionAudit(name, samples, float(max_violation), tolerance, passed, notes, skipped)


def documented_assumptions() -> List[AssumptionAudit]:
    return [
        AssumptionAudit(a.name, 0, 0.0, 0.0, True, a.detail, checked=False)
        for a in AUDITS if not a.checkable
    ]


# ============================
# Checkable audits
# ============================
BatchPolicy = Callable[[np.ndarray], np.ndarray]


def audit_input_constraint(policy: Union[PolicyModel, BatchPolicy], box, n_x: int, n_samples: int, seed: int,
                           scale: float = WIDE_STATE_SCALE) -> AssumptionAudit:
    """
    Evaluates the policy on states uniform in [−scale, scale]^n_x and measures
    the largest distance of an output to the input box.
    """
    if n_samples == 0:
        return _audit("input_constraint", 0, 0.0, 0.0, notes="vacuous: no samples")
    fn = (lambda X: policy_eval(policy, X)) if isinstance(policy, PolicyModel) else policy
    lower, upper = (np.asarray(b, dtype=float) for b in box)
    X = np.random.default_rng(seed).uniform(-scale, scale, size=(n_samples, n_x))
    U = np.asarray(fn(X), dtype=float).reshape(n_samples, -1)
    excess = np.maximum(np.maximum(U - upper, lower - U), 0.0)
    n_bad = int(np.sum(np.any(excess > 0.0, axis=1)))
    return _audit("input_constraint", n_samples, float(np.max(excess)), 0.0,
                  notes=f"{n_bad} of {n_samples} outputs outside the box")


def audit_error_bounds(eps_V: Sequence[float], eps_pi: Sequence[float]) -> List[AssumptionAudit]:
    """Both (abs, rel) pairs must be finite."""
    out = []
    for name, (a, r) in (("value_error_bound", eps_V), ("policy_error_bound", eps_pi)):
        finite = math.isfinite(a) and math.isfinite(r)
        out.append(_audit(name, 1, 0.0 if finite else math.inf, 0.0, notes=f"abs={a:.6g} rel={r:.6g}"))
    return out


def audit_descent_inequality(policy: Callable[[np.ndarray], np.ndarray], value: ValueModel, problem: ScmpcProblem,
                             states, eps_V: float, eps_pi: float, solver_cfg: SolverConfig, seed: int,
                             value_mpc: Optional[Callable[[np.ndarray], float]] = None,
                             tolerance: float = 1e-6) -> AssumptionAudit:
    """
    Per state, margin = ℓ(x, u_MPC) + V_MPC(f(x, u_MPC)) + ε̂_V + ε̂_π − L(x, π(x)).
    V_MPC at the successor is solved for unless value_mpc is given.
    States where the SCMPC fails are skipped and counted.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    model = problem.model
    seeds = np.random.SeedSequence(seed).spawn(2 * len(states))
    worst = -math.inf
    skipped = 0
    for j, x in enumerate(states):
        try:
            sol = solve_scmpc(problem, x, solver_cfg, int(seeds[2 * j].generate_state(1)[0]))
            u_mpc = sol.u_seq[0]
            x_next = sol.x_traj[1]
            if value_mpc is not None:
                v_next = float(value_mpc(x_next))
            else:
                v_next = solve_scmpc(problem, x_next, solver_cfg, int(seeds[2 * j + 1].generate_state(1)[0])).V
        except SolverFailure as e:
            logger.warning("descent audit skips x=%s: %s", x.tolist(), e)
            skipped += 1
            continue
        u = np.asarray(policy(x), dtype=float).reshape(model.n_u)
        lhs = loss_mpc(x, u, value, model, problem.Q, problem.R)
        rhs = float(stage_cost(problem, x, u_mpc)) + v_next + eps_V + eps_pi
        worst = max(worst, lhs - rhs)
    evaluated = len(states) - skipped
    max_violation = max(worst, 0.0) if evaluated else 0.0
    return _audit("descent_inequality", evaluated, max_violation, tolerance,
                  notes=f"worst margin {-worst:.6g}" if evaluated else "no state could be evaluated",
                  skipped=skipped)


# ============================
# ISS diagnostic
# ============================
@dataclass
class IssFit:
    offset: float
    gain: float
    rate: float
    passed: bool


@dataclass
class IssSummary:
    fits: List[IssFit] = field(default_factory=list)
    neighborhood: float = 0.0

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.fits)

    @property
    def worst_offset(self) -> float:
        return max((f.offset for f in self.fits), default=0.0)

    def to_audit(self) -> AssumptionAudit:
        n_fail = sum(1 for f in self.fits if not f.passed)
        return _audit("iss", len(self.fits), max(self.worst_offset - self.neighborhood, 0.0), 0.0,
                      notes=f"diagnostic; {n_fail} of {len(self.fits)} trajectories outside the neighborhood")


def iss_fit(errors: np.ndarray, neighborhood: float) -> IssFit:
    """
    Envelope e(k) ≤ c·λᵏ·e(0) + offset. The offset is the largest error over
    the final part of the run; λ is the smallest rate keeping c ≤ ISS_MAX_GAIN.
    """
    e = np.asarray(errors, dtype=float)
    tail = max(1, int(math.ceil(ISS_TAIL_FRACTION * len(e))))
    offset = float(np.max(e[-tail:]))
    if e[0] == 0.0:
        return IssFit(offset, 0.0, 0.0, offset <= neighborhood)
    k = np.arange(len(e))
    excess = np.maximum(e - offset, 0.0)
    gain, rate = math.inf, 1.0
    for lam in ISS_RATES:
        c = float(np.max(excess / (lam**k * e[0])))
        if c <= ISS_MAX_GAIN:
            gain, rate = c, float(lam)
            break
    return IssFit(offset, gain, rate, offset <= neighborhood)


def iss_diagnostic(report: Union[ClosedLoopReport, TrajectoryRecord], target_coords: Sequence[int],
                   neighborhood: float) -> IssSummary:
    """Settling check on the selected state coordinates of every trajectory."""
    records = report.trajectories if isinstance(report, ClosedLoopReport) else [report]
    idx = list(target_coords)
    summary = IssSummary(neighborhood=neighborhood)
    for t in records:
        errors = np.linalg.norm(t.states[:, idx], axis=1)
        summary.fits.append(iss_fit(errors, neighborhood))
    return summary


# ============================
# Persistence
# ============================
def append_audits(path: Path, audits: Sequence[AssumptionAudit], provenance: str) -> Path:
    path = Path(path)
    runs = read_json(path) if path.exists() else []
    runs.append({"provenance": provenance, "audits": [a.to_json() for a in audits]})
    return write_json(path, runs)
