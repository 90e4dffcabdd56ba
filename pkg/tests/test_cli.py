import json

import numpy as np
import pytest

from polbc.cli import main, parse_seeds
from polbc.core_math import make_rng
from polbc.environments import load_scenario
from polbc.gmm import StateDataset
from polbc.io import dataset_from_csv, dataset_to_csv, distance_matrix_from_csv
from polbc.policies import PathPolicy, policy_to_json

TINY_TR = {"iterations": 2, "steps_per_env": 64, "minibatches": 4, "minibatch_size": 32}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "walker.json").write_text(policy_to_json(PathPolicy(0, 5, 0.2)))
    (tmp_path / "blue.txt").write_text(load_scenario("doorway")[1].to_text())
    return tmp_path


def write_dataset(path, x):
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    path.write_text(dataset_to_csv(StateDataset(x, [x.shape[0]], [0.0], np.zeros(x.shape[0]))))


def test_gather_writes_episodes_and_manifest(workdir):
    assert main(["gather", "--env", "dangerous-path", "--policy", "walker.json",
                 "--episodes", "5", "--seed", "3", "--out", "a.csv"]) == 0
    data = dataset_from_csv((workdir / "a.csv").read_text())
    assert data.n_episodes == 5
    manifest = json.loads((workdir / "a.csv.manifest.json").read_text())
    assert manifest["command"] == "gather" and manifest["seeds"] == [3]
    assert "a.csv" in manifest["outputs"]


def test_gather_is_deterministic(workdir):
    for name in ("a.csv", "b.csv"):
        main(["gather", "--env", "gridworld-doorway", "--policy", "blue.txt", "--epsilon", "0.3",
              "--episodes", "4", "--seed", "1", "--out", name])
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()


def test_gather_usage_errors(workdir):
    assert main(["gather", "--env", "dangerous-path", "--policy", "walker.json",
                 "--episodes", "0", "--out", "x.csv"]) == 2
    assert main(["gather", "--env", "mars", "--policy", "walker.json",
                 "--episodes", "1", "--out", "x.csv"]) == 2
    assert main(["gather", "--env", "point", "--policy", "missing.json",
                 "--episodes", "1", "--out", "x.csv"]) == 2
    assert not (workdir / "x.csv").exists()


def test_distance_methods(workdir):
    rng = make_rng(0)
    same = rng.normal(size=200)
    write_dataset(workdir / "p.csv", same)
    write_dataset(workdir / "q.csv", same)
    assert main(["distance", "p.csv", "q.csv", "--components", "2", "--out", "sv.csv"]) == 0
    m = distance_matrix_from_csv((workdir / "sv.csv").read_text())
    assert m.values[0, 1] == pytest.approx(0.0, abs=1e-9)
    assert (workdir / "sv.csv.ubm.json").exists() and (workdir / "sv.csv.supervectors.json").exists()

    write_dataset(workdir / "lo.csv", [0.0, 0.1, 0.2])
    write_dataset(workdir / "hi.csv", [9.8, 9.9, 10.0])
    assert main(["distance", "lo.csv", "hi.csv", "--method", "histogram", "--out", "h.csv"]) == 0
    assert distance_matrix_from_csv((workdir / "h.csv").read_text()).values[0, 1] == 1.0

    write_dataset(workdir / "g0.csv", rng.normal(0, 1, 10_000))
    write_dataset(workdir / "g1.csv", rng.normal(1, 1, 10_000))
    assert main(["distance", "g0.csv", "g1.csv", "--method", "gaussian", "--out", "g.csv"]) == 0
    assert distance_matrix_from_csv((workdir / "g.csv").read_text()).values[0, 1] == pytest.approx(1.0, abs=0.1)


def test_distance_usage_errors(workdir):
    write_dataset(workdir / "one.csv", [1.0, 2.0])
    (workdir / "two.csv").write_text("episode,step,reward,s0,s1\n0,0,0,1,2\n0,1,0,2,3\n")
    assert main(["distance", "one.csv", "--out", "d.csv"]) == 2
    assert main(["distance", "one.csv", "two.csv", "--out", "d.csv"]) == 2


def test_demo_gridworld(workdir):
    assert main(["demo-gridworld", "--scenario", "doorway", "--epsilons", "0,0.5,1",
                 "--episodes", "500", "--out", "demo.csv"]) == 0
    rows = [r.split(",") for r in (workdir / "demo.csv").read_text().splitlines()]
    assert rows[0] == ["epsilon", "return_distance", "action_distance", "state_distance",
                       "exact_state_distance"]
    assert len({r[2] for r in rows[1:]}) == 1
    assert float(rows[1][2]) == 2.0 and float(rows[1][4]) > 0.5
    assert main(["demo-gridworld", "--scenario", "maze", "--out", "x.csv"]) == 2


def test_experiment_config_errors(workdir):
    (workdir / "bad.json").write_text('{"bogus": 1}')
    assert main(["experiment", "trust-region", "--config", "bad.json", "--out", "o"]) == 2
    (workdir / "neg.json").write_text('{"minibatches": 0}')
    assert main(["experiment", "trust-region", "--config", "neg.json", "--out", "o"]) == 2
    assert main(["experiment", "trust-region", "--seeds", "x", "--out", "o"]) == 2


def test_threads_env_var(workdir, monkeypatch):
    monkeypatch.setenv("POLBC_THREADS", "zero")
    assert main(["gather", "--env", "dangerous-path", "--policy", "walker.json",
                 "--episodes", "1", "--out", "t.csv"]) == 2
    monkeypatch.setenv("POLBC_THREADS", "4")
    assert main(["gather", "--env", "dangerous-path", "--policy", "walker.json",
                 "--episodes", "1", "--out", "t.csv"]) == 0


def test_threshold_sweep_rows(workdir):
    (workdir / "tiny.json").write_text(json.dumps(TINY_TR))
    assert main(["experiment", "trust-region", "--constraint", "max_tv", "--threshold", "sweep",
                 "--config", "tiny.json", "--out", "sweep"]) == 0
    rows = (workdir / "sweep" / "summary.csv").read_text().splitlines()[1:]
    from polbc.trainers.trust_region import THRESHOLD_GRIDS

    assert len(rows) == len(THRESHOLD_GRIDS["max_tv"])


def test_parse_seeds():
    assert parse_seeds("3") == [3]
    assert parse_seeds("0,2") == [0, 2]
    assert parse_seeds("1:4") == [1, 2, 3]


def test_malformed_policy_is_usage_error(workdir):
    (workdir / "broken.json").write_text('{"type": "softmax", "sizes": [5, 5], '
                                         '"activations": ["identity"], "params": [0.0]}')
    assert main(["gather", "--env", "dangerous-path", "--policy", "broken.json",
                 "--episodes", "1", "--out", "z.csv"]) == 2


def test_policy_env_mismatch_is_runtime_error(workdir):
    # a valid 3-input policy cannot act on 5-dimensional observations
    from polbc.policies import SoftmaxPolicy

    (workdir / "small.json").write_text(policy_to_json(SoftmaxPolicy.zeros(3, 5)))
    assert main(["gather", "--env", "dangerous-path", "--policy", "small.json",
                 "--episodes", "1", "--out", "z.csv"]) == 1
    assert not (workdir / "z.csv").exists()


def test_replay_detects_changes(workdir, capsys):
    main(["gather", "--env", "dangerous-path", "--policy", "walker.json",
          "--episodes", "3", "--out", "r.csv"])
    assert main(["replay", "r.csv.manifest.json"]) == 0
    doc = json.loads((workdir / "r.csv.manifest.json").read_text())
    doc["outputs"]["r.csv"] = "0" * 64
    (workdir / "r.csv.manifest.json").write_text(json.dumps(doc))
    assert main(["replay", "r.csv.manifest.json"]) == 1
    (workdir / "walker.json").write_text(policy_to_json(PathPolicy(0, 5, 0.9)))
    assert main(["replay", "r.csv.manifest.json"]) == 1
    assert main(["replay", "nothing.json"]) == 2
