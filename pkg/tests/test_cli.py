import json
import os
from pathlib import Path

import pytest

from mlgee.cli import main

TOY = Path(__file__).resolve().parent.parent / "sample_data" / "toy_two_level.csv"


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_fit_cc_on_toy_csv(tmp_path, capsys):
    out_path = tmp_path / "fit.json"
    code, _, _ = run_cli([
        "fit", "--data", str(TOY), "--treatment", "arm", "--outcome", "score",
        "--method", "cc", "--out", str(out_path),
    ], capsys)
    assert code == 0
    payload = json.loads(out_path.read_text())
    # all clusters have size 3, so the exchangeable fit is the arm means
    obs0 = [4.0, 5.0, 3.5, 4.5]
    obs1 = [7.0, 8.0, 9.0, 6.5, 8.5, 7.5, 8.0]
    expected = sum(obs1) / len(obs1) - sum(obs0) / len(obs0)
    assert payload["result"]["effect"] == pytest.approx(expected, abs=1e-8)
    assert "seed" in payload["config"]


def test_mmr_requires_both_model_sets(capsys):
    code, _, err = run_cli([
        "fit", "--data", str(TOY), "--treatment", "arm", "--outcome", "score",
        "--method", "mmr",
        "--ps-individual", "R ~ 1 + A + x1",
    ], capsys)
    assert code == 2
    assert "candidate set" in err


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--data", "--schema", "--levels", "--method", "--link",
                 "--corr", "--ps-individual", "--ps-cluster", "--ipw-formula",
                 "--em", "--no-em", "--seed", "--out"):
        assert flag in out
    with pytest.raises(SystemExit) as exc2:
        main(["study", "--help"])
    assert exc2.value.code == 0
    out2 = capsys.readouterr().out
    for flag in ("--scenario", "--reps", "--methods", "--bootstrap",
                 "--threads", "--out"):
        assert flag in out2


def test_bad_data_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster,id,arm,score\na,1,0,oops\n")
    code, _, err = run_cli([
        "fit", "--data", str(bad), "--treatment", "arm",
        "--outcome", "score", "--method", "cc",
    ], capsys)
    assert code == 3
    assert "data error" in err


def test_simulate_writes_csv(tmp_path, capsys):
    out_path = tmp_path / "sim.csv"
    code, _, _ = run_cli([
        "simulate", "--scenario", "three-level-demo", "--seed", "4",
        "--out", str(out_path),
    ], capsys)
    assert code == 0
    header = out_path.read_text().splitlines()[0]
    assert header.startswith("cluster,subcluster,id,A,Y")


def test_bootstrap_command(tmp_path, capsys):
    out_path = tmp_path / "boot.json"
    code, _, _ = run_cli([
        "bootstrap", "--data", str(TOY), "--treatment", "arm",
        "--outcome", "score", "--method", "cc", "--bootstrap", "12",
        "--seed", "5", "--out", str(out_path),
    ], capsys)
    assert code == 0
    payload = json.loads(out_path.read_text())
    assert payload["bootstrap"]["replicates"] == 12
    assert len(payload["bootstrap"]["se"]) == 2


def test_study_writes_csv_and_json_reproducibly(tmp_path, capsys):
    args = [
        "study", "--scenario", "alt-n3", "--reps", "2", "--methods", "cc",
        "--bootstrap", "3", "--seed", "7", "--threads", "1",
    ]
    out1 = tmp_path / "a.csv"
    code, _, _ = run_cli(args + ["--out", str(out1)], capsys)
    assert code == 0
    out2 = tmp_path / "b.csv"
    code, _, _ = run_cli(args + ["--out", str(out2)], capsys)
    assert code == 0
    assert out1.read_bytes() == out2.read_bytes()
    lines = out1.read_text().strip().split("\n")
    assert lines[0] == "method,bias,emp_se,est_se,coverage"
    assert lines[1].startswith("cc,")
    meta = json.loads((tmp_path / "a.csv.json").read_text())
    assert meta["config"]["seed"] == 7


def test_env_seed_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MLGEE_SEED", "123")
    out_path = tmp_path / "fit.json"
    code, _, _ = run_cli([
        "fit", "--data", str(TOY), "--treatment", "arm", "--outcome", "score",
        "--method", "cc", "--out", str(out_path),
    ], capsys)
    assert code == 0
    payload = json.loads(out_path.read_text())
    assert payload["config"]["seed"] == 123
