import json
import subprocess
import sys

import pytest

from flfl import cli
from flfl import metrics as M

SMALL = dict(num_classes=3, input_dim=6, num_labeled=6, num_unlabeled=294, hidden_dims=[16], num_clients=6,
             clients_per_round=3, rounds=2, local_epochs=1, server_epochs=1, n_test_per_class=20, spread=0.3)


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_run_writes_outputs(config, tmp_path, monkeypatch):
    monkeypatch.delenv("FLFL_SEED", raising=False)
    monkeypatch.delenv("FLFL_OUT", raising=False)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(config), "--out", str(out), "--preset", "cat", "--quiet"]) == 0
    assert len(M.read_metrics(out / "metrics.csv")) == 2
    saved = json.loads((out / "config.json").read_text())
    assert saved["thresholding"] == "cat" and saved["aggregation"] == "uniform"


def test_precedence_flag_env_config(config, monkeypatch):
    monkeypatch.setenv("FLFL_SEED", "7")
    monkeypatch.setenv("FLFL_OUT", "/tmp/from-env")
    args = cli.build_parser().parse_args(["run", "--config", str(config)])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 7 and cfg.out_dir == "/tmp/from-env"
    args = cli.build_parser().parse_args(["run", "--config", str(config), "--seed", "3", "--out", "x", "--workers", "2"])
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.out_dir, cfg.workers) == (3, "x", 2)


def test_bad_env_seed(config, monkeypatch, capsys):
    monkeypatch.setenv("FLFL_SEED", "abc")
    assert cli.main(["run", "--config", str(config)]) == 2
    assert "FLFL_SEED" in capsys.readouterr().err


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**SMALL, "bogus": 1}))
    assert cli.main(["run", "--config", str(path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_inspect_partition(config, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("FLFL_SEED", raising=False)
    dump = tmp_path / "parts.csv"
    assert cli.main(["inspect-partition", "--config", str(config), "--dump", str(dump)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "client,total,class_0,class_1,class_2"
    rows = [list(map(int, l.split(","))) for l in lines[1:]]
    assert len(rows) == 6
    assert sum(r[1] for r in rows) == 294
    assert all(r[1] == sum(r[2:]) for r in rows)
    assert len(dump.read_text().splitlines()) == 294


def test_module_entry_point(config):
    out = subprocess.run([sys.executable, "-m", "flfl.cli", "inspect-partition", "--config", str(config)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("client,total")
