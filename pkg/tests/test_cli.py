import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ifcode import pdegen
from ifcode.checkpoint import load_model
from ifcode.cli import ConfigError, derive_seed, parse_m_grid, resolve_config, run


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run(["generate", "--pde", "poisson", "--meshes", "6,10", "--counts", "6,3",
                "--test", "4", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    out = tmp_path_factory.mktemp("ref")
    assert run(["generate", "--pde", "poisson", "--meshes", "6,10", "--counts", "1,1",
                "--test", "3", "--test-mesh", "20", "--seed", "2", "--out", str(out)]) == 0
    return out


def train(data, out, *extra):
    return run(["train", "--model", "ifc-ode2", "--data", str(data), "--k", "3", "--hidden", "5",
                "--epochs", "3", "--seed", "1", "--out", str(out), *extra])


def test_generate_outputs(data):
    names = {p.name for p in data.iterdir()}
    assert {"manifest.json", "train.bin", "test.bin", "run_config.json"} <= names
    ds = pdegen.load_dataset(data)
    assert len(ds.train) == 9 and ds.d == 100
    assert json.loads((data / "run_config.json").read_text())["command"] == "generate"


def test_m_grid():
    grid = parse_m_grid("0:2.14:0.0715")
    assert len(grid) == 31 and grid[0] == 0.0 and grid[-1] == 2.14
    assert parse_m_grid("0,1,1.29") == [0.0, 1.0, 1.29]
    for bad in ("", "1:0:0.1", "0:1:0", "a,b", "-1"):
        with pytest.raises(ConfigError):
            parse_m_grid(bad)


def test_seed_streams():
    assert derive_seed(1, "data") == derive_seed(1, "data")
    assert derive_seed(1, "data") != derive_seed(1, "init")
    assert derive_seed(1, "data") != derive_seed(2, "data")


def test_train_eval_sweep(data, reference, tmp_path):
    run_dir = tmp_path / "run"
    assert train(data, run_dir) == 0
    for name in ("checkpoint.json", "params.f64", "report.csv", "metrics.json", "run_config.json"):
        assert (run_dir / name).exists()
    rows = (run_dir / "report.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,lr,val_nrmse" and len(rows) == 4
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert np.isfinite(metrics["test_nrmse"])

    assert run(["eval", "--model", str(run_dir), "--data", str(data)]) == 0
    result = json.loads((run_dir / "eval.json").read_text())
    assert result["nrmse"] == pytest.approx(metrics["test_nrmse"], rel=1e-12)

    sweep = tmp_path / "sweep.csv"
    assert run(["sweep-fidelity", "--model", str(run_dir), "--m", "0:2.14:0.0715",
                "--reference", str(reference), "--out", str(sweep)]) == 0
    with open(sweep) as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["m", "mesh", "nrmse"] and len(table) == 32
    assert all(np.isfinite(float(r[2])) for r in table[1:])
    assert float(table[-1][1]) == pytest.approx(6 + 2.14 * 4)
    assert (tmp_path / "sweep.run_config.json").exists()


@pytest.mark.parametrize("kind", ["sf", "ifc-gpode", "pca-gp", "drc"])
def test_train_other_models(data, tmp_path, kind):
    out = tmp_path / kind
    assert run(["train", "--model", kind, "--data", str(data), "--k", "2", "--hidden", "4",
                "--epochs", "2", "--gp-iters", "3", "--out", str(out)]) == 0
    model, header = load_model(out)
    assert header["model"]["kind"] == kind
    assert header["output_mesh"] == 10


def test_rerun_from_echo_is_bit_identical(data, tmp_path):
    assert train(data, tmp_path / "a") == 0
    echo = json.loads((tmp_path / "a" / "run_config.json").read_text())
    echo["out"] = str(tmp_path / "b")
    (tmp_path / "cfg.json").write_text(json.dumps(echo))
    assert run(["train", "--config", str(tmp_path / "cfg.json")]) == 0
    for name in ("report.csv", "params.f64"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('k = 4\nlr = 0.005\nepochs = 7\nmeshes = [8, 16]\n')
    resolved, _ = resolve_config(["train", "--config", str(cfg), "--data", "d", "--out", "o",
                                  "--k", "6"])
    assert resolved.k == 6 and resolved.lr == 0.005 and resolved.epochs == 7
    assert resolved.meshes == (8, 16) and resolved.hidden == 40
    bad = tmp_path / "bad.toml"
    bad.write_text("learning_rate = 0.01\n")
    with pytest.raises(ConfigError):
        resolve_config(["train", "--config", str(bad), "--data", "d", "--out", "o"])


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--data", "d", "--out", "o", "--bogus", "1"],
    ["train", "--data", "d", "--out", "o", "--lr", "0.5"],
    ["train", "--data", "d", "--out", "o", "--epochs", "6000"],
    ["train", "--model", "mfhogp", "--data", "d", "--out", "o"],
    ["generate", "--meshes", "16,8", "--counts", "1,1", "--out", "o"],
    ["generate", "--meshes", "8,16", "--counts", "1", "--out", "o"],
    ["sweep-fidelity", "--model", "r", "--reference", "x", "--out", "s.csv"],
])
def test_invalid_config_exits_1(argv, capsys):
    assert run(argv) == 1
    assert "configuration error" in capsys.readouterr().err


def test_runtime_failure_exits_2(tmp_path, capsys):
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("ifcode:")


def test_parallel_generation_matches_serial(tmp_path, monkeypatch):
    argv = ["generate", "--pde", "heat", "--meshes", "6,10", "--counts", "3,2", "--test", "2",
            "--seed", "3", "--out"]
    assert run(argv + [str(tmp_path / "s")]) == 0
    monkeypatch.setenv("IFC_NUM_THREADS", "2")
    assert run(argv + [str(tmp_path / "p")]) == 0
    for name in ("train.bin", "test.bin"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ifcode", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "sweep-fidelity" in proc.stdout
