import json
from pathlib import Path

import pytest

from upcycled_fl.cli import main
from upcycled_fl.data import load_dataset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _json_out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_generate_data(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    rc = main(["generate-data", "--beta", "1", "--gamma", "1", "--devices", "4", "--dimx", "3",
               "--classes", "2", "--size", "20", "--out", str(out)])
    assert rc == 0
    ds = load_dataset(out)
    assert len(ds) == 4 and ds.d_x == 3
    assert _json_out(capsys)["test"] == 4 * 2


def test_accountant_output(capsys):
    assert main(["accountant", "--mechanism", "output", "--rounds", "50", "--samples", "100"]) == 0
    assert _json_out(capsys)["eps"] == pytest.approx(0.341807021220756, rel=1e-12)


def test_accountant_objective(capsys):
    rc = main(["accountant", "--mechanism", "objective", "--rounds", "80", "--alpha", "10", "--u1", "1",
               "--u2", "0.25", "--samples", "100", "--mu", "0.5"])
    assert rc == 0
    assert _json_out(capsys)["eps"] == pytest.approx(17.12, rel=1e-14)


def test_accountant_domain_error_exits_nonzero(capsys):
    rc = main(["accountant", "--mechanism", "output", "--rounds", "50", "--samples", "100", "--eps", "1e-4"])
    assert rc == 2
    assert "below" in capsys.readouterr().err


def _tiny_config(tmp_path, **run):
    text = """
[dataset]
iid = true
devices = 4
dimx = 3
classes = 3
size_kind = "fixed"
size_n = 20

[strategy]
mu = 0.5

[upcycled]
enabled = true
lambda0 = 0.5

[solver]
epochs = 1

[run]
rounds = 4
seeds = [0, 1]
diagnostics = true
checkpoint_every = 1
"""
    path = tmp_path / "tiny.toml"
    path.write_text(text)
    return path


def test_run_compare_and_analyze(tmp_path, capsys):
    cfg = _tiny_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert _json_out(capsys)["completed"] is True
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "a"), "--out", str(tmp_path / "cmp.json")]) == 0
    assert json.loads((tmp_path / "cmp.json").read_text())["mean_accuracy_delta"] == 0.0
    capsys.readouterr()
    assert main(["analyze", "--run", str(tmp_path / "a"), "--probes", "3"]) == 0
    assert set(json.loads(capsys.readouterr().out)["seeds"]) == {"0", "1"}


def test_grid_writes_cells(tmp_path, capsys):
    cfg = _tiny_config(tmp_path)
    rc = main(["grid", "--config", str(cfg), "--set", "upcycled.lambda0=0.1,1.0", "--out", str(tmp_path / "g")])
    assert rc == 0
    assert len(list((tmp_path / "g").glob("*/config.toml"))) == 2


def test_bad_config_exits_two(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('[strategy]\nname = "feddyn"\n')
    assert main(["run", "--config", str(path)]) == 2
    assert "feddyn" in capsys.readouterr().err
