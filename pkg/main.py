#!/usr/bin/env python3
"""
main.py

Command-line entry point of the learning pipeline:
- gen-data      label sampled states with the soft-constrained MPC
- fit-value     regress the MPC value function (or register a closed form)
- fit-policy    train the look-ahead (IL) policy or the behavioral-cloning baseline
- simulate      one closed-loop run of a policy
- evaluate      evaluation suite and the comparison table
- consistency   scalar-example convergence experiment
- report        plot-ready CSVs
- audit         assumption audits and stability diagnostics, appended to audits.json

Usage:
    python main.py gen-data --experiment unicycle --seed 7 --workers 8
    python main.py fit-value --experiment quad1d --exact-value --seed 1
    python main.py fit-policy --experiment quad1d --method bc --seed 1
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from artifacts import (
    Manifest,
    begin_manifest,
    check_lineage,
    finish_manifest,
    load_manifest,
    read_json,
    write_csv,
    write_json,
)
from checks import (
    append_audits,
    audit_descent_inequality,
    audit_error_bounds,
    audit_input_constraint,
    documented_assumptions,
    iss_diagnostic,
)
from config import RunConfig, UniformBox, load_experiment, with_overrides
from data import count_flagged, dataset_arrays, generate_dataset, read_dataset, sample_states, write_dataset
from errors import AmpcError, ContractViolation, MissingArtifact, UnsupportedConfiguration
from policyfit import (
    PolicyModel,
    estimate_eps_pi,
    load_policy_model,
    policy_eval,
    save_policy_model,
    train_policy_bc,
    train_policy_il,
)
from progress import set_progress
from scmpc import ScmpcProblem, build_problem, mpc_policy
from simulate import (
    ClosedLoopReport,
    Policy,
    bc_limit_distance,
    closed_loop,
    consistency_experiment,
    evaluate_suite,
    grid_policy,
    nn_policy,
    pi_star_grid,
    save_report,
    state_rows,
)
from tables import comparison_table, consistency_summary
from valuefit import (
    QuadraticValue,
    ValueModel,
    estimate_eps_V,
    fit_value,
    load_value_model,
    save_value_model,
    value_eval,
)

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_FLAGGED = 2

NN_METHODS = ("il", "bc")


# -------------------------
# Run configuration
# -------------------------
def resolve_seed(flag: Optional[int]) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("AMPC_SEED")
    if env is None:
        raise ContractViolation("No seed given: pass --seed or set AMPC_SEED")
    try:
        return int(env)
    except ValueError:
        raise ContractViolation(f"AMPC_SEED must be an integer, got {env!r}")


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, Any]:
    """KEY=VALUE pairs; VALUE is read as JSON when it parses, else as a string."""
    out: Dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ContractViolation(f"Override '{pair}' is not of the form KEY=VALUE")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_run(args) -> RunConfig:
    exp = load_experiment(args.experiment)
    overrides: Dict[str, Any] = {}
    if args.config:
        loaded = read_json(Path(args.config))
        if not isinstance(loaded, dict):
            raise ContractViolation(f"{args.config}: override file must hold a JSON object")
        overrides.update(loaded)
    overrides.update(parse_overrides(args.set))
    exp = with_overrides(exp, overrides)
    workdir = Path(args.workdir) if args.workdir else Path("runs") / exp.name
    return RunConfig(experiment=exp, workdir=workdir, seed=resolve_seed(args.seed), workers=args.workers)


def stage_config(run: RunConfig, **extra: Any) -> Dict[str, Any]:
    return {"experiment": run.experiment.model_dump(mode="json"), "seed": run.seed, **extra}


# -------------------------
# Artifact loading
# -------------------------
def load_dataset(run: RunConfig):
    path = run.dataset_dir / "dataset.csv"
    if not path.exists():
        raise MissingArtifact(path)
    return read_dataset(path), load_manifest(run.dataset_dir)


def load_value(run: RunConfig) -> ValueModel:
    return load_value_model(run.value_dir)


def load_policy(run: RunConfig, method: str) -> PolicyModel:
    return load_policy_model(run.policy_dir(method))


def make_policy(name: str, run: RunConfig, problem: ScmpcProblem, value: Optional[ValueModel]) -> Policy:
    if name in NN_METHODS:
        return nn_policy(load_policy(run, name))
    if name == "pistar":
        if value is None:
            raise MissingArtifact(run.value_dir / "value.json")
        return grid_policy(value, problem.model, problem.Q, problem.R, run.experiment.suite.pistar_grid)
    if name == "scmpc":
        return mpc_policy(problem, run.experiment.solver, run.seed)
    raise ContractViolation(f"Unknown policy '{name}' (expected il, bc, pistar or scmpc)")


def _artifact_inputs(run: RunConfig, names: List[str]) -> Dict[str, Path]:
    inputs = {"value": run.value_dir / "value.json"}
    for n in names:
        if n in NN_METHODS:
            inputs[f"policy_{n}"] = run.policy_dir(n) / "policy.json"
    return inputs


def _lineage_of(run: RunConfig, names: List[str]) -> Optional[str]:
    manifests: Dict[str, Manifest] = {"value": load_manifest(run.value_dir)}
    for n in names:
        if n in NN_METHODS:
            manifests[f"policy_{n}"] = load_manifest(run.policy_dir(n))
    return check_lineage(manifests)


# -------------------------
# Commands
# -------------------------
def cmd_gen_data(run: RunConfig, args) -> int:
    exp = run.experiment
    plan = exp.plan
    if args.n is not None:
        if not isinstance(plan, UniformBox):
            raise UnsupportedConfiguration("--n applies to uniform-box sampling plans only")
        plan = plan.model_copy(update={"n": args.n})
    m = begin_manifest("gen-data", stage_config(run, n=args.n, labels_per_state=args.labels_per_state))
    m.lineage = m.id
    records = generate_dataset(exp.problem, plan, exp.solver, run.seed, run.workers, args.labels_per_state)
    flagged = count_flagged(records)
    m.extra = {"rows": len(records), "flagged": flagged}
    paths = write_dataset(records, run.dataset_dir, m.id)
    finish_manifest(m, run.dataset_dir, paths)
    if flagged:
        print(f"{flagged} of {len(records)} rows flagged (solver failure)", file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def _curve_rows(curves: Dict[str, List[float]]) -> List[List[Any]]:
    names = sorted(curves)
    n = max(len(curves[k]) for k in names)
    return [[e, *[curves[k][e] if e < len(curves[k]) else float("nan") for k in names]] for e in range(n)]


def cmd_fit_value(run: RunConfig, args) -> int:
    exp = run.experiment
    out = run.value_dir
    if args.exact_value:
        if exp.exact_value is None:
            raise UnsupportedConfiguration(f"experiment '{exp.name}' has no closed-form value")
        vm: ValueModel = QuadraticValue(np.asarray(exp.exact_value, dtype=float))
        m = begin_manifest("fit-value", stage_config(run, exact=True))
        m.extra = {"kind": "quadratic", "eps_V": [0.0, 0.0]}
        paths = save_value_model(vm, out, {"provenance": m.id, "eps_V_abs": 0.0, "eps_V_rel": 0.0})
        finish_manifest(m, out, paths)
        return EXIT_OK

    records, dm = load_dataset(run)
    arr = dataset_arrays(records)
    cfg = exp.value_train
    if args.no_grid:
        cfg = cfg.model_copy(update={"grid_lr": None, "grid_decay": None})
    m = begin_manifest("fit-value", stage_config(run, no_grid=args.no_grid),
                       inputs={"dataset": run.dataset_dir / "dataset.csv"}, lineage=dm.lineage)
    fit = fit_value(arr["x"], arr["V_p"], arr["V_xi"], cfg, run.seed, run.workers)
    eps_abs, eps_rel = estimate_eps_V(fit.value, arr["x"], arr["V"])
    cells = {k: {"lr": f.lr, "lr_decay": f.lr_decay, "mse": f.mse} for k, f in fit.fits.items()}
    m.extra = {"kind": "network", "eps_V": [eps_abs, eps_rel], "cells": cells}
    logger.info("value error bound: abs %.4g rel %.4g", eps_abs, eps_rel)
    meta = {"provenance": m.id, "eps_V_abs": eps_abs, "eps_V_rel": eps_rel, "training": cells,
            "hidden": list(cfg.hidden), "epochs": cfg.epochs}
    paths = save_value_model(fit.value, out, meta)
    curves = {f"loss_{k}": f.curve for k, f in fit.fits.items() if f.curve}
    if curves:
        paths.append(write_csv(out / "curve.csv", ["epoch", *sorted(curves)], _curve_rows(curves)))
    finish_manifest(m, out, paths)
    return EXIT_OK


def cmd_fit_policy(run: RunConfig, args) -> int:
    exp = run.experiment
    method = args.method
    records, dm = load_dataset(run)
    arr = dataset_arrays(records)
    value = load_value(run)
    check_lineage({"dataset": dm, "value": load_manifest(run.value_dir)})
    problem = build_problem(exp.problem)
    model = problem.model
    cfg = exp.policy_train
    if args.no_grid:
        cfg = cfg.model_copy(update={"grid_lr": None, "grid_decay": None})
    out = run.policy_dir(method)
    m = begin_manifest(
        f"fit-policy-{method}",
        stage_config(run, method=method, no_grid=args.no_grid),
        inputs={"dataset": run.dataset_dir / "dataset.csv", "value": run.value_dir / "value.json"},
        lineage=dm.lineage,
    )
    if method == "il":
        fit = train_policy_il(arr["x"], value, model, problem.Q, problem.R, cfg, run.seed, run.workers)
    else:
        fit = train_policy_bc(arr["x"], arr["u"], (model.u_lower, model.u_upper), cfg, run.seed, run.workers)
    eps_abs, eps_rel = estimate_eps_pi(fit.policy, arr["x"], value, model, problem.Q, problem.R, exp.eps_grid)
    logger.info("policy %s: final loss %.6g, error bound abs %.4g rel %.4g", method, fit.loss, eps_abs, eps_rel)
    m.extra = {"method": method, "eps_pi": [eps_abs, eps_rel], "final_loss": fit.loss, "lr": fit.lr,
               "lr_decay": fit.lr_decay}
    metrics = {"method": method, "final_loss": fit.loss, "eps_pi_abs": eps_abs, "eps_pi_rel": eps_rel,
               "lr": fit.lr, "lr_decay": fit.lr_decay, "provenance": m.id}
    paths = save_policy_model(fit.policy, out, {"provenance": m.id, "hidden": list(cfg.hidden)})
    paths.append(write_json(out / "metrics.json", metrics))
    paths.append(write_csv(out / "curve.csv", ["epoch", "loss"], list(enumerate(fit.curve))))
    finish_manifest(m, out, paths)
    return EXIT_OK


def cmd_simulate(run: RunConfig, args) -> int:
    exp = run.experiment
    problem = build_problem(exp.problem)
    value = load_value(run) if (run.value_dir / "value.json").exists() else None
    policy = make_policy(args.policy, run, problem, value)
    x0 = np.asarray(args.x0 if args.x0 else exp.iss.starts[0], dtype=float)
    T = args.T or exp.suite.T
    out = run.stage_dir("simulate")
    m = begin_manifest("simulate", stage_config(run, policy=args.policy, x0=x0.tolist(), T=T),
                       inputs=_artifact_inputs(run, [args.policy]) if value is not None else {},
                       lineage=_lineage_of(run, [args.policy]) if value is not None else None)
    rec = closed_loop(policy, problem, x0, T, value)
    report = ClosedLoopReport(args.policy, [rec])
    header, rows = state_rows(report)
    summary = {"policy": args.policy, "x0": x0.tolist(), "T": T, "p_t": rec.p_t, "p_c": rec.p_c,
               "violations": rec.violations, "provenance": m.id}
    paths = [write_csv(out / f"{args.policy}.csv", header, rows), write_json(out / f"{args.policy}.json", summary)]
    finish_manifest(m, out, paths)
    print(json.dumps({k: v for k, v in summary.items() if k != "provenance"}))
    return EXIT_OK


def cmd_evaluate(run: RunConfig, args) -> int:
    exp = run.experiment
    names = [n.strip() for n in args.policies.split(",") if n.strip()]
    suite = exp.suite
    if args.n_trajectories:
        suite = suite.model_copy(update={"n_trajectories": args.n_trajectories})
    problem = build_problem(exp.problem)
    value = load_value(run)
    out = run.stage_dir("evaluate")
    m = begin_manifest("evaluate", stage_config(run, policies=names, suite=suite.model_dump(mode="json")),
                       inputs=_artifact_inputs(run, names), lineage=_lineage_of(run, names))
    paths: List[Path] = []
    traj_csvs: List[Path] = []
    eval_times: Dict[str, float] = {}
    for name in names:
        report = evaluate_suite(make_policy(name, run, problem, value), problem, value, suite, run.seed, name)
        written = save_report(report, out, m.id)
        paths.extend(written)
        traj_csvs.append(written[1])
        eval_times[name] = report.eval_time
    columns, rows = comparison_table(traj_csvs, eval_times)
    paths.append(write_csv(out / "comparison.csv", columns, rows))
    finish_manifest(m, out, paths)
    return EXIT_OK


def _consistency_value(run: RunConfig) -> ValueModel:
    if run.experiment.exact_value is not None:
        return QuadraticValue(np.asarray(run.experiment.exact_value, dtype=float))
    return load_value(run)


def cmd_consistency(run: RunConfig, args) -> int:
    exp = run.experiment
    cfg = exp.consistency
    if cfg is None:
        raise UnsupportedConfiguration(f"experiment '{exp.name}' defines no consistency study")
    ns_list = args.ns or cfg.ns_list
    seeds = args.seeds or cfg.seeds
    out = run.stage_dir("consistency")
    m = begin_manifest("consistency", stage_config(run, ns=ns_list, seeds=seeds))
    rows = consistency_experiment(ns_list, seeds, exp, _consistency_value(run), run.workers, cfg)
    header = ["method", "a", "b", "N_s", "seed", "mean", "sup"]
    runs_csv = write_csv(out / "consistency_runs.csv", header, [[r[h] for h in header] for r in rows])
    columns, summary = consistency_summary(runs_csv)
    paths = [runs_csv, write_csv(out / "consistency.csv", columns, summary)]
    limits = [{"a": a, "b": b, "bc_limit": bc_limit_distance(a, b)} for a, b in cfg.intervals]
    paths.append(write_json(out / "consistency.json", {"bc_limits": limits, "provenance": m.id}))
    finish_manifest(m, out, paths)
    return EXIT_OK


def cmd_report(run: RunConfig, args) -> int:
    exp = run.experiment
    problem = build_problem(exp.problem)
    model = problem.model
    names = [n for n in NN_METHODS if (run.policy_dir(n) / "policy.json").exists()]
    if not names:
        raise MissingArtifact(run.policy_dir("il") / "policy.json")
    manifests = {"value": load_manifest(run.value_dir)}
    manifests.update({f"policy_{n}": load_manifest(run.policy_dir(n)) for n in names})
    if (run.dataset_dir / "manifest.json").exists():
        manifests["dataset"] = load_manifest(run.dataset_dir)
    if (run.stage_dir("evaluate") / "manifest.json").exists():
        manifests["evaluate"] = load_manifest(run.stage_dir("evaluate"))
    lineage = check_lineage(manifests)
    value = load_value(run)
    policies = {n: load_policy(run, n) for n in names}
    out = run.reports_dir
    m = begin_manifest("report", stage_config(run, policies=names), inputs=_artifact_inputs(run, names),
                       lineage=lineage)
    paths: List[Path] = []

    if model.n_x == 1:
        xs = np.linspace(exp.suite.start_lower[0], exp.suite.start_upper[0], exp.report_points)[:, None]
        cols = {n: policy_eval(policies[n], xs)[:, 0] for n in names}
        star = np.array([pi_star_grid(x, value, model, problem.Q, problem.R, exp.eps_grid)[0] for x in xs])
        header = ["x", *[f"u_{n}" for n in names], "u_pistar"]
        rows = [[x[0], *[cols[n][i] for n in names], star[i]] for i, x in enumerate(xs)]
        paths.append(write_csv(out / "policy_sweep.csv", header, rows))
    elif model.n_x == 2:
        starts = np.asarray(exp.iss.starts, dtype=float)
        all_rows: List[List[Any]] = []
        header: List[str] = []
        for name in [*names, "pistar"]:
            policy = make_policy(name, run, problem, value)
            recs = [closed_loop(policy, problem, x0, exp.iss.T, value) for x0 in starts]
            header, rows = state_rows(ClosedLoopReport(name, recs))
            all_rows.extend(rows)
        paths.append(write_csv(out / "trajectories.csv", header, all_rows))
        pts = sample_states(exp.plan, run.seed)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        g1 = np.linspace(lo[0], hi[0], 81)
        g2 = np.linspace(lo[1], hi[1], 61)
        grid = np.array([[a, b] for a in g1 for b in g2])
        v = value_eval(value, grid)
        paths.append(write_csv(out / "value_levels.csv", ["x0", "x1", "V"], [[*p, vv] for p, vv in zip(grid, v)]))
    else:
        raise UnsupportedConfiguration(f"no report layout for n_x = {model.n_x}")

    paths.append(write_json(out / "report.json", {"policies": names, "lineage": lineage, "provenance": m.id}))
    finish_manifest(m, out, paths)
    return EXIT_OK


def cmd_audit(run: RunConfig, args) -> int:
    exp = run.experiment
    problem = build_problem(exp.problem)
    model = problem.model
    names = [n for n in NN_METHODS if (run.policy_dir(n) / "policy.json").exists()]
    if not names:
        raise MissingArtifact(run.policy_dir("il") / "policy.json")
    value = load_value(run)
    vman = load_manifest(run.value_dir)
    lineage = _lineage_of(run, names)
    out = run.stage_dir("audit")
    m = begin_manifest("audit", stage_config(run, n_samples=args.n_samples, descent_states=args.descent_states),
                       inputs=_artifact_inputs(run, names), lineage=lineage)

    if (run.dataset_dir / "dataset.csv").exists():
        pool = dataset_arrays(load_dataset(run)[0])["x"]
    else:
        pool = sample_states(exp.plan, run.seed)
    rng = np.random.default_rng(run.seed)
    take = min(args.descent_states, len(pool))
    states = pool[np.sort(rng.choice(len(pool), size=take, replace=False))]
    exact = QuadraticValue(np.asarray(exp.exact_value, dtype=float)) if exp.exact_value is not None else None
    value_mpc: Optional[Callable[[np.ndarray], float]] = (lambda x: value_eval(exact, x)) if exact is not None else None

    audits = []
    eps_V = vman.extra.get("eps_V", [float("nan"), float("nan")])
    for name in names:
        pm = load_policy(run, name)
        pman = load_manifest(run.policy_dir(name))
        eps_pi = pman.extra.get("eps_pi", [float("nan"), float("nan")])
        found = [audit_input_constraint(pm, pm.box, model.n_x, args.n_samples, run.seed)]
        found.extend(audit_error_bounds(eps_V, eps_pi))
        found.append(audit_descent_inequality(nn_policy(pm), value, problem, states, eps_V[0], eps_pi[0],
                                              exp.solver, run.seed, value_mpc=value_mpc))
        recs = [closed_loop(nn_policy(pm), problem, np.asarray(x0, dtype=float), exp.iss.T, value)
                for x0 in exp.iss.starts]
        found.append(iss_diagnostic(ClosedLoopReport(name, recs), exp.iss.target_coords,
                                    exp.iss.neighborhood).to_audit())
        for a in found:
            a.notes = f"[{name}] {a.notes}"
        audits.extend(found)
    audits.extend(documented_assumptions())
    path = append_audits(out / "audits.json", audits, m.id)
    finish_manifest(m, out, [path])
    failed = [a.assumption for a in audits if not a.passed]
    if failed:
        logger.warning("audits not passed: %s", ", ".join(failed))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, Any], int]] = {
    "gen-data": cmd_gen_data,
    "fit-value": cmd_fit_value,
    "fit-policy": cmd_fit_policy,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "consistency": cmd_consistency,
    "report": cmd_report,
    "audit": cmd_audit,
}


# -------------------------
# CLI & main
# -------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--experiment", default="quad1d", help="Preset name (quad1d, unicycle) or experiment JSON path")
    common.add_argument("--config", help="JSON object of flat overrides, e.g. {\"solver.restarts\": 5}")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Flat override (repeatable)")
    common.add_argument("--workdir", help="Artifact root (default runs/<experiment>)")
    common.add_argument("--seed", type=int, help="Run seed (falls back to AMPC_SEED)")
    common.add_argument("--workers", type=int, default=1, help="Parallel worker processes")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")

    parser = argparse.ArgumentParser(description="Learn NN surrogates of soft-constrained MPC policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Label sampled states with the SCMPC")
    p.add_argument("--n", type=int, help="Override the number of uniformly sampled states")
    p.add_argument("--labels-per-state", type=int, default=1, help="Independent solver draws per state")

    p = sub.add_parser("fit-value", parents=[common], help="Fit the value function")
    p.add_argument("--exact-value", action="store_true", help="Register the closed-form value instead of training")
    p.add_argument("--no-grid", action="store_true", help="Train a single (lr, decay) cell")

    p = sub.add_parser("fit-policy", parents=[common], help="Train a policy")
    p.add_argument("--method", choices=NN_METHODS, default="il")
    p.add_argument("--no-grid", action="store_true", help="Train a single (lr, decay) cell")

    p = sub.add_parser("simulate", parents=[common], help="Single closed-loop run")
    p.add_argument("--policy", default="il", help="il, bc, pistar or scmpc")
    p.add_argument("--x0", type=float, nargs="+", help="Initial state")
    p.add_argument("--T", type=int, help="Number of steps")

    p = sub.add_parser("evaluate", parents=[common], help="Evaluation suite and comparison table")
    p.add_argument("--policies", default="bc,il,pistar", help="Comma-separated policy names")
    p.add_argument("--n-trajectories", type=int, help="Override the number of suite trajectories")

    p = sub.add_parser("consistency", parents=[common], help="Distance to the optimal set vs. sample size")
    p.add_argument("--ns", type=int, nargs="+", help="Sample sizes")
    p.add_argument("--seeds", type=int, nargs="+", help="Training seeds")

    sub.add_parser("report", parents=[common], help="Plot-ready CSVs")

    p = sub.add_parser("audit", parents=[common], help="Assumption audits and stability diagnostics")
    p.add_argument("--n-samples", type=int, default=100_000, help="States for the input-constraint audit")
    p.add_argument("--descent-states", type=int, default=50, help="States for the descent-inequality audit")
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    set_progress(not quiet and sys.stderr.isatty())


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        run = build_run(args)
        return COMMANDS[args.command](run, args)
    except AmpcError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
