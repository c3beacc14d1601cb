import json

import pytest

from sizegrad import bench, optimizer
from sizegrad.cli import main


@pytest.fixture
def design(tmp_path):
    c = bench.generate_circuit(bench.BenchSpec(seed=1, n_gates=(6, 6)), 0)
    return c.write(tmp_path / "d")


def test_help_exit_zero(capsys):
    assert main(["size", "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_no_command_is_usage_error():
    assert main([]) == 1
    assert main(["size"]) == 1


def test_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.ckt"
    assert main(["sta", str(missing)]) == 2
    assert "nope" in capsys.readouterr().err


def test_bad_netlist(tmp_path, capsys):
    ckt = tmp_path / "bad.ckt"
    ckt.write_text("clock 10\ngate U1 NAND9 0 0 0\n")
    (tmp_path / "bad.lib.json").write_text('{"INV": [{"p": 1, "r": 1, "q": 1, "a": 1}]}')
    assert main(["sta", str(ckt)]) == 2


def test_sta_json(design, capsys):
    assert main(["sta", str(design), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert {"wns", "tns", "nve", "paths"} <= set(doc)


def test_size_full_run(design, tmp_path):
    out = tmp_path / "run"
    assert main(["size", str(design), "--out", str(out), "--max-iters", "30"]) == 0
    for name in ("changelist.txt", "trajectory.csv", "run.json"):
        assert (out / name).exists()
    run = json.loads((out / "run.json").read_text())
    assert run["seed"] == 0
    assert (out / "trajectory.csv").read_text().startswith("iter,wns,tns")


def test_size_changelists_identical(design, tmp_path):
    for tag in ("a", "b"):
        assert main(["size", str(design), "--out", str(tmp_path / tag), "--seed", "5"]) == 0
    assert (tmp_path / "a" / "changelist.txt").read_bytes() == (tmp_path / "b" / "changelist.txt").read_bytes()


def test_gen_and_oracle(tmp_path):
    assert main(["gen", "--count", "2", "--gates", "4", "--out", str(tmp_path / "g")]) == 0
    ckts = sorted((tmp_path / "g").glob("*.ckt"))
    assert len(ckts) == 2
    assert main(["oracle", str(ckts[0]), "--objective", "tns", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "changelist.txt").exists()


def test_train_and_learned_size(design, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"seed": 3, "n_gates": [4, 5], "suite_size": 2}))
    m = tmp_path / "m"
    assert main(["train", "--spec", str(spec), "--epochs", "2", "--out", str(m)]) == 0
    assert (m / "model.json").exists() and (m / "history.csv").exists()
    assert main(["size", str(design), "--mode", "learned", "--model", str(m / "model.json"),
                 "--max-iters", "5", "--out", str(tmp_path / "r")]) == 0


def test_learned_without_model(design):
    assert main(["size", str(design), "--mode", "learned"]) == 1


def test_bench_small(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"seed": 0, "n_gates": [4, 4], "suite_size": 2}))
    assert main(["bench", "--spec", str(spec), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "results.csv").exists()


def test_verify_list(capsys):
    assert main(["verify", "--list"]) == 0
    names = capsys.readouterr().out.split()
    assert "gradient" in names and "tape" in names


def test_verify_suite_passes():
    assert main(["verify", "--suite", "lse", "--suite", "sta"]) == 0


def test_break_ste_fails_gradient(capsys):
    assert main(["verify", "--suite", "gradient", "--break-ste"]) == 3
    assert "FAIL gradient" in capsys.readouterr().out
    assert optimizer.STE_MULTIPLIER == 1.0
