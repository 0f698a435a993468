import json

import numpy as np
import pandas as pd
import pytest

import cli
from cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, bench_sizes, cmd_bench, cmd_run, cmd_verify, main, run_checks
from knn_graph import graph_load
from metrics import read_csv
from tests.conftest import TINY_MAZE


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    monkeypatch.delenv("ELEMENT_OUTPUT_DIR", raising=False)


def tiny_config(tmp_path, out="out", **overrides):
    maze = tmp_path / "maze.txt"
    maze.write_text(TINY_MAZE)
    data = {
        "environment": "maze",
        "maze_path": str(maze),
        "output_dir": str(tmp_path / out),
        "schedule": {"U": 40, "T_u": 20, "total_steps": 200},
        "search": {"R1": 5, "R2": 5},
        "agent": {"batch_size": 8},
        "evaluation": {"snapshot_episodes": [1, 2]},
    }
    data.update(overrides)
    path = tmp_path / f"{out}.json"
    path.write_text(json.dumps(data))
    return path


def test_run_writes_outputs(tmp_path):
    assert cmd_run(str(tiny_config(tmp_path))) == EXIT_OK
    out = tmp_path / "out"
    for name in ("run.csv", "coverage.pgm", "graph.knng", "reward_ep_1.pgm", "reward_l_2.pgm"):
        assert (out / name).exists()
    log = read_csv(out / "run.csv")
    assert log.records[-1].graph_size == len(graph_load((out / "graph.knng").read_bytes()))


def test_run_rejects_negative_beta(tmp_path, capsys):
    path = tiny_config(tmp_path, reward={"beta": -1})
    assert cmd_run(str(path)) == EXIT_CONFIG
    assert "reward.beta" in capsys.readouterr().err


def test_run_rejects_malformed_bounds(tmp_path, capsys):
    path = tiny_config(tmp_path, environment="pointmass", pointmass={"bounds": [[0.0], [1.0, 2.0]]})
    assert cmd_run(str(path)) == EXIT_CONFIG
    assert "pointmass.bounds" in capsys.readouterr().err


def test_run_rejects_bad_maze(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("S.\n.")
    assert cmd_run(str(tiny_config(tmp_path, maze_path=str(bad)))) == EXIT_CONFIG


def test_run_reports_unexpected_failure(tmp_path, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "_run_seed", explode)
    assert cmd_run(str(tiny_config(tmp_path))) == EXIT_FAILURE
    assert "disk on fire" in capsys.readouterr().err


def test_run_is_byte_identical(tmp_path):
    cmd_run(str(tiny_config(tmp_path, out="a")))
    cmd_run(str(tiny_config(tmp_path, out="b")))
    assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()


def test_multiple_seeds_get_subdirectories(tmp_path):
    assert cmd_run(str(tiny_config(tmp_path, seeds=[0, 1]))) == EXIT_OK
    assert (tmp_path / "out" / "seed_0" / "run.csv").exists()
    assert (tmp_path / "out" / "seed_1" / "run.csv").exists()
    assert len(pd.read_csv(tmp_path / "out" / "summary.csv")) == 2


def test_pointmass_run_writes_endpoints(tmp_path):
    path = tiny_config(
        tmp_path,
        environment="pointmass",
        pointmass={"episode_len": 50, "q_bins": 10},
        schedule={"U": 50, "T_u": 25, "total_steps": 200},
    )
    assert cmd_run(str(path)) == EXIT_OK
    endpoints = pd.read_csv(tmp_path / "out" / "endpoints.csv")
    assert list(endpoints.columns) == ["episode", "x", "y"]
    assert len(endpoints) == 4


def test_pointmass_run_with_coordinate_features(tmp_path):
    path = tiny_config(
        tmp_path,
        environment="pointmass",
        encoder={"kind": "random_with_coordinates", "out_dim": 4},
        pointmass={"episode_len": 50, "q_bins": 10},
        schedule={"U": 50, "T_u": 25, "total_steps": 200},
    )
    assert cmd_run(str(path)) == EXIT_OK
    assert graph_load((tmp_path / "out" / "graph.knng").read_bytes()).dim == 6


def test_verify_passes(capsys):
    assert cmd_verify() == EXIT_OK
    printed = capsys.readouterr().out
    for check in ("recall_at_3_d2", "recall_at_3_d8", "edge_accuracy_d2", "gap_below_epsilon",
                  "truncated_renyi2_within_gap", "upper_bound_identity", "renyi_two_points"):
        assert check in printed


def test_verify_catches_injected_fault(capsys):
    assert main(["verify", "--inject-fault"]) == EXIT_FAILURE
    assert "FAILED: closed_form_optimal, closed_form_gradient\n" in capsys.readouterr().err


def test_verify_fails_when_recall_misses(monkeypatch):
    monkeypatch.setattr(cli, "recall_at_k", lambda g, queries, cfg: 0.5)
    failed = {r.check for r in cli._check_graph(np.random.default_rng(0)) if not r.passed}
    assert {"recall_at_3_d2", "recall_at_3_d8"} <= failed


def test_bench_sizes():
    assert bench_sizes(1000) == [1000]
    assert bench_sizes(100_000) == [1000, 10_000, 100_000]
    assert bench_sizes(50_000) == [1000, 10_000]


def test_bench_small(tmp_path):
    assert cmd_bench(1000, 2, 3, 5, 5, out=str(tmp_path), n_queries=20) == EXIT_OK
    table = pd.read_csv(tmp_path / "bench.csv")
    assert table["n"].tolist() == [1000]
    assert (table["touched_max"] <= table["touched_bound"]).all()
    assert table["recall"].between(0, 1).all()


def test_bench_rejects_small_n(tmp_path):
    assert cmd_bench(10, 2, 3, 5, 5, out=str(tmp_path)) == EXIT_CONFIG


@pytest.mark.slow
def test_graph_search_scales_better_than_brute_force(tmp_path):
    assert cmd_bench(100_000, 2, 3, 20, 20, out=str(tmp_path)) == EXIT_OK
    table = pd.read_csv(tmp_path / "bench.csv").set_index("n")
    brute_slope = table.loc[100_000, "brute_us"] / table.loc[1000, "brute_us"]
    graph_slope = table.loc[100_000, "graph_us"] / table.loc[1000, "graph_us"]
    assert brute_slope / graph_slope >= 10
    assert table.loc[100_000, "speedup"] >= 10
    assert np.all(table["touched_max"] <= table["touched_bound"])
