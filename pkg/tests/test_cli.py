import sys

import pytest

import data
from artifacts import read_csv, read_json
from errors import SolverFailure
from main import EXIT_FLAGGED, EXIT_OK, main
from progress import set_progress

FAST = ["--set", "policy_train.epochs=5", "--quiet"]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("AMPC_SEED", raising=False)
    yield
    set_progress(True)


def run(cmd, workdir, *extra, seed=0):
    argv = [cmd, "--experiment", "quad1d", "--workdir", str(workdir), *FAST, *extra]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


def test_pipeline_on_the_scalar_example(tmp_path):
    wd = tmp_path / "run"
    assert run("gen-data", wd, "--n", "20") == EXIT_OK
    first = (wd / "data" / "dataset.csv").read_bytes()
    assert run("gen-data", wd, "--n", "20") == EXIT_OK
    assert (wd / "data" / "dataset.csv").read_bytes() == first

    assert run("fit-value", wd, "--exact-value") == EXIT_OK
    assert read_json(wd / "value" / "manifest.json")["lineage"] is None
    for method in ("il", "bc"):
        assert run("fit-policy", wd, "--method", method) == EXIT_OK
        metrics = read_json(wd / f"policy_{method}" / "metrics.json")
        assert metrics["eps_pi_abs"] >= 0.0
        assert read_json(wd / f"policy_{method}" / "manifest.json")["lineage"] == \
            read_json(wd / "data" / "manifest.json")["id"]

    assert run("evaluate", wd, "--n-trajectories", "3", "--set", "suite.T=5") == EXIT_OK
    header, rows = read_csv(wd / "evaluate" / "comparison.csv")
    assert header == ["policy", "perf", "p_t", "p_c", "eval_time", "violations"]
    assert [r[0] for r in rows] == ["bc", "il", "pistar"]

    assert run("simulate", wd, "--policy", "pistar", "--x0", "0.5", "--T", "4") == EXIT_OK
    summary = read_json(wd / "simulate" / "pistar.json")
    assert summary["T"] == 4 and summary["violations"] == 0

    assert run("report", wd) == EXIT_OK
    header, rows = read_csv(wd / "reports" / "policy_sweep.csv")
    assert header == ["x", "u_il", "u_bc", "u_pistar"]
    assert len(rows) == 401

    assert run("audit", wd, "--n-samples", "100", "--descent-states", "3") == EXIT_OK
    runs = read_json(wd / "audit" / "audits.json")
    names = {a["assumption"] for a in runs[-1]["audits"]}
    assert {"input_constraint", "descent_inequality", "iss", "mpc_stabilizes"} <= names


def test_consistency_command(tmp_path):
    wd = tmp_path / "run"
    assert run("consistency", wd, "--ns", "10", "--seeds", "0") == EXIT_OK
    _, rows = read_csv(wd / "consistency" / "consistency_runs.csv")
    assert len(rows) == 4
    limits = read_json(wd / "consistency" / "consistency.json")["bc_limits"]
    assert [entry["bc_limit"] for entry in limits] == [pytest.approx(0.5), pytest.approx(0.5)]


def test_missing_dataset_exits_fatally(tmp_path, capsys):
    assert run("fit-policy", tmp_path / "empty", "--method", "il") == 1
    assert "Missing input artifact" in capsys.readouterr().err


def test_seed_is_required(tmp_path, capsys):
    assert run("gen-data", tmp_path, "--n", "2", seed=None) == 1
    assert "AMPC_SEED" in capsys.readouterr().err


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("AMPC_SEED", "3")
    assert run("gen-data", tmp_path / "env", "--n", "5", seed=None) == EXIT_OK
    assert run("gen-data", tmp_path / "flag", "--n", "5", seed=3) == EXIT_OK
    assert (tmp_path / "env" / "data" / "dataset.csv").read_bytes() == \
        (tmp_path / "flag" / "data" / "dataset.csv").read_bytes()


def test_bad_override_exits_fatally(tmp_path):
    assert run("gen-data", tmp_path, "--set", "solver.restarts=0") == 1


def test_mixed_lineage_is_refused(tmp_path):
    wd = tmp_path / "run"
    assert run("gen-data", wd, "--n", "10", seed=0) == EXIT_OK
    assert run("fit-value", wd, "--exact-value", seed=0) == EXIT_OK
    assert run("fit-policy", wd, "--method", "il", seed=0) == EXIT_OK
    assert run("gen-data", wd, "--n", "10", seed=1) == EXIT_OK
    assert run("fit-policy", wd, "--method", "bc", seed=1) == EXIT_OK
    assert run("report", wd, seed=1) == 1


def test_flagged_rows_give_a_distinct_exit_code(tmp_path, monkeypatch, capsys):
    def failing(*args, **kwargs):
        raise SolverFailure("diverged")

    monkeypatch.setattr(data, "solve_scmpc", failing)
    assert run("gen-data", tmp_path, "--n", "3") == EXIT_FLAGGED
    assert "3 of 3 rows flagged" in capsys.readouterr().err
    manifest = read_json(tmp_path / "data" / "manifest.json")
    assert manifest["extra"]["flagged"] == 3


def test_unknown_experiment(tmp_path, capsys):
    assert main(["gen-data", "--experiment", "pendulum", "--workdir", str(tmp_path), "--seed", "0", "--quiet"]) == 1
    assert "Unknown experiment" in capsys.readouterr().err


def test_quiet_silences_progress_bars_on_a_terminal(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(sys.stderr, "isatty", lambda: True)
    assert run("gen-data", tmp_path, "--n", "3") == EXIT_OK
    assert "%|" not in capsys.readouterr().err


def test_progress_bars_shown_on_a_terminal(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(sys.stderr, "isatty", lambda: True)
    argv = ["gen-data", "--experiment", "quad1d", "--workdir", str(tmp_path), "--n", "3", "--seed", "0"]
    assert main(argv) == EXIT_OK
    assert "gen-data: 100%|" in capsys.readouterr().err
