import json
import subprocess
import sys

import pytest

from fathom_sim.cli import main

CONFIG = """objective = "logistic"
rounds = 8
num_clients = 12
clients_per_round = 4
size_median = 40
class_sep = 3.0
eta0 = 0.3
batch0 = 10.0
target_loss = [0.5, 1e-9]
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return path


def test_run_writes_metrics(config, tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "3"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["rounds_completed"] == 8
    assert "NA" in capsys.readouterr().out


def test_run_overrides(config, tmp_path):
    out = tmp_path / "b"
    assert main(["run", "--config", str(config), "--out", str(out), "--algo", "fedavg",
                 "--rounds", "3"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["algorithm"] == "fedavg" and summary["rounds_completed"] == 3


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('objective = "logistic"\nrounds = 3\nrounds = 4\n')
    assert main(["run", "--config", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.toml")]) == 2
    assert main(["report", "--in", str(tmp_path)]) == 2


def test_grid_bad_list_exit_2(config):
    assert main(["grid", "--config", str(config), "--eta", "0.1,x", "--batch", "10"]) == 2


def test_divergence_exit_3(tmp_path):
    cfg = tmp_path / "div.toml"
    cfg.write_text('objective = "quadratic"\nrounds = 60\neta0 = 1000.0\nbatch0 = 500.0\n'
                   'num_clients = 5\nclients_per_round = 2\nn_features = 3\nsize_median = 10\n')
    out = tmp_path / "d"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 3
    assert (out / "rounds.csv").is_file()


def test_grid_and_report(config, tmp_path, capsys):
    assert main(["grid", "--config", str(config), "--eta", "0.1,0.3", "--batch", "10",
                 "--out", str(tmp_path / "g")]) == 0
    text = capsys.readouterr().out
    assert "best: eta=" in text
    doc = json.loads((tmp_path / "g" / "grid.json").read_text())
    assert len(doc["cells"]) == 2

    runs = tmp_path / "runs"
    for algo in ("fathom", "fedavg"):
        assert main(["run", "--config", str(config), "--algo", algo, "--out", str(runs / algo)]) == 0
    capsys.readouterr()
    assert main(["report", "--in", str(runs)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 3
    assert table[0].split()[-2:] == ["eval_loss<=0.5", "eval_loss<=1e-09"]
    assert all(line.split()[-1] == "NA" for line in table[1:])


def test_bounds_command(config, tmp_path):
    out = tmp_path / "r"
    assert main(["run", "--config", str(config), "--out", str(out)]) == 0
    assert main(["bounds", "--in", str(out)]) == 0
    doc = json.loads((out / "bounds.json").read_text())
    assert len(doc["rounds"]) == 8


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fathom_sim", "run", "--config", str(config),
                           "--rounds", "2", "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


@pytest.mark.parametrize("name, rounds", [("quadratic", 20), ("logistic", 10)])
def test_shipped_configs_reach_their_targets(name, rounds, tmp_path):
    from pathlib import Path

    path = Path(__file__).parent.parent / "configs" / f"{name}.toml"
    out = tmp_path / name
    assert main(["run", "--config", str(path), "--rounds", str(rounds), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert all(t is not None for t in summary["rounds_to_target"].values())
