import json
import os

import pandas as pd
import pytest

from conftest import SMALL_CONFIG
from delta.delta_main import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, EXIT_SOLVER, main
from delta.des import LogicalTopology
from delta.helper import read_json, write_json

QUICK_GA = ["--pop", "4", "--gens", "1"]


@pytest.fixture
def run(settings_file):
    def invoke(*args) -> int:
        return main(["--settings", settings_file, *args])

    return invoke


@pytest.fixture
def small_dag_file(run, tmp_path):
    path = str(tmp_path / "dag.json")
    assert run("generate", "--config", SMALL_CONFIG, "--out", path) == EXIT_OK
    return path


def test_generate(capsys, small_dag_file):
    document = read_json(small_dag_file)
    assert document["num_pods"] == 4
    assert "inter-pod tasks" in capsys.readouterr().out


def test_simulate_and_prune(run, small_dag_file, tmp_path, capsys):
    trace = str(tmp_path / "trace.json")
    code = run("simulate", "--dag", small_dag_file, "--ideal", "--out", trace)
    assert code == EXIT_OK
    assert read_json(trace)["ideal"] is True

    bounds = str(tmp_path / "bounds.json")
    code = run("prune", "--dag", small_dag_file, "--trace", trace, "--out", bounds)
    assert code == EXIT_OK
    payload = read_json(bounds)
    assert payload["K"] >= 1
    assert payload["t_up_ms"] > 0
    assert "retained cells" in capsys.readouterr().out


def test_simulate_needs_a_network(run, small_dag_file):
    assert run("simulate", "--dag", small_dag_file) == EXIT_CONFIG


def test_optimize_then_evaluate(run, tmp_path, capsys):
    topo = str(tmp_path / "prop.json")
    code = run("optimize", "--config", SMALL_CONFIG, "--algo", "prop", "--out", topo)
    assert code == EXIT_OK
    assert LogicalTopology.from_dict(read_json(topo)).num_pods == 4

    assert run("evaluate", "--config", SMALL_CONFIG, "--topo", topo) == EXIT_OK
    assert "nct" in capsys.readouterr().out

    trace = str(tmp_path / "trace.json")
    dag = str(tmp_path / "dag.json")
    run("generate", "--config", SMALL_CONFIG, "--out", dag)
    assert run("simulate", "--dag", dag, "--topo", topo, "--out", trace) == EXIT_OK
    assert "NCT" in capsys.readouterr().out


def test_optimize_fast_writes_convergence(run, tmp_path):
    topo = str(tmp_path / "fast.json")
    args = ["--config", SMALL_CONFIG, "--algo", "fast", "--out", topo, *QUICK_GA]
    assert run("optimize", *args) == EXIT_OK
    history = pd.read_csv(tmp_path / "fast_convergence.csv")
    assert history["generation"].iloc[0] == 0


def test_sweep(run, tmp_path):
    experiment = tmp_path / "exp.json"
    experiment.write_text(
        json.dumps(
            {
                "name": "cli",
                "workloads": [os.path.abspath(SMALL_CONFIG)],
                "algorithms": ["ideal", "prop"],
            }
        )
    )
    out = tmp_path / "runs"
    code = run(
        "sweep", str(experiment), "--output-dir", str(out), "--bandwidths", "200,400"
    )
    assert code == EXIT_OK
    report = pd.read_csv(out / "cli" / "report.csv")
    assert sorted(report["bandwidth"].unique()) == [200.0, 400.0]
    assert len(report) == 4


def test_realloc(run, tmp_path):
    out = tmp_path / "realloc.csv"
    code = run("realloc", "--config", SMALL_CONFIG, "--out", str(out), *QUICK_GA)
    assert code == EXIT_OK
    assert list(pd.read_csv(out)["scenario"]) == ["A", "A^T", "A^T+freed"]


def test_bad_config_exit_code(run, tmp_path):
    missing = str(tmp_path / "nope.json")
    assert run("generate", "--config", missing, "--out", "dag.json") == EXIT_CONFIG


def test_missing_solver_exit_code(run):
    code = run(
        "optimize",
        "--config",
        SMALL_CONFIG,
        "--algo",
        "joint",
        "--solver-cmd",
        "no-such-solver-binary {lp} {sol}",
    )
    assert code == EXIT_SOLVER


def test_unroutable_topology_exit_code(run, tmp_path):
    topo = str(tmp_path / "thin.json")
    write_json(topo, LogicalTopology.from_pairs([4, 4, 4, 4], {(0, 1): 1}).to_dict())
    code = run("evaluate", "--config", SMALL_CONFIG, "--topo", topo)
    assert code == EXIT_INFEASIBLE


def test_topology_size_mismatch(run, tmp_path):
    topo = str(tmp_path / "small.json")
    write_json(topo, LogicalTopology.from_pairs([4, 4], {(0, 1): 1}).to_dict())
    assert run("evaluate", "--config", SMALL_CONFIG, "--topo", topo) == EXIT_CONFIG
