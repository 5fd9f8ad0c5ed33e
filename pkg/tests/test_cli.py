import json

import numpy as np
import pytest

from oblivdsp import cli
from oblivdsp.formats import read_cube


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("OBLIVDSP_OUT", str(tmp_path / "out"))
    return tmp_path / "out"


def test_depth_audit_vitals(out, capsys):
    assert cli.main(["depth-audit", "--pipeline", "vitals"]) == 0
    text = capsys.readouterr().out
    assert "total depth: 11" in text
    report = json.loads((out / "depth_audit.json").read_text())
    assert [r["cumulative"] for r in report["ledgers"]["vitals"]] == [1, 2, 3, 4, 7, 8, 9, 10, 11]
    assert report["config_digest"]


def test_depth_audit_gesture_and_order1(out, capsys):
    assert cli.main(["depth-audit", "--pipeline", "gesture"]) == 0
    report = json.loads((out / "depth_audit.json").read_text())
    assert [r["cumulative"] for r in report["ledgers"]["gesture"]] == [1, 2, 3, 5, 6, 6, 8, 10, 11]
    assert cli.main(["depth-audit", "--pipeline", "vitals", "--taylor-order", "1"]) == 0
    assert "total depth: 9" in capsys.readouterr().out


def test_depth_audit_violation_exit_code(out, capsys):
    assert cli.main(["depth-audit", "--pipeline", "vitals", "--set", "ckks.depth=8"]) == 2
    assert "stage '|X|^2'" in capsys.readouterr().out  # the ninth level


def test_trace_check_identical(out, capsys):
    code = cli.main(["trace-check", "--pipeline", "gesture", "--trials", "10", "--shape", "2,2,4,8",
                     "--set", "gesture.fc_dims=64,8,5"])
    assert code == 0
    assert "IDENTICAL (10/10)" in capsys.readouterr().out


def test_trace_check_shape_change(out, capsys):
    code = cli.main(["trace-check", "--pipeline", "vitals", "--trials", "2", "--shape", "64,1,32,1",
                     "--compare-shape", "64,1,64,1"])
    assert code == 3
    assert "DIVERGED" in capsys.readouterr().out
    report = json.loads((out / "trace_check_vitals.json").read_text())
    assert report["divergences"][0]["index"] is not None


def test_run_vitals_fixture(out, capsys):
    assert cli.main(["run-vitals", "--backend", "exactsim", "--standard"]) == 0
    report = json.loads((out / "vitals_report.json").read_text())
    res = report["result"]
    assert 11.5 <= res["target_bin"] <= 12.5
    assert abs(res["rr_bpm"] - 15) <= 3 and abs(res["hr_bpm"] - 72) <= 6
    assert report["standard"]["target_bin"] == 12
    assert (out / "vitals_trace.txt").read_text().startswith("# config ")


def test_reports_reproducible(out):
    def body():
        cli.main(["run-vitals", "--seed", "3"])
        rep = json.loads((out / "vitals_report.json").read_text())
        rep.pop("timestamp")
        return rep

    assert body() == body()


def test_synth_and_run_gesture(tmp_path, out, capsys):
    cube_path = tmp_path / "g.csv"
    assert cli.main(["synth", "--kind", "gesture", "--shape", "2,2,4,8", "--output", str(cube_path)]) == 0
    assert read_cube(cube_path).shape == (2, 2, 4, 8)
    code = cli.main(["run-gesture", "--input", str(cube_path), "--set", "gesture.fc_dims=64,8,5"])
    assert code == 0
    report = json.loads((out / "gesture_report.json").read_text())
    assert 0 <= report["result"]["predicted"] < 5


def test_error_exit_codes(tmp_path, out):
    bad = tmp_path / "bad.cube"
    bad.write_bytes(b"garbage")
    assert cli.main(["run-vitals", "--input", str(bad)]) == 4
    assert cli.main(["run-vitals", "--set", "vitals.gamma=3"]) == 5
    assert cli.main(["run-vitals", "--set", "nonsense"]) == 5
    assert cli.main(["run-vitals", "--backend", "ckks", "--keys", str(tmp_path / "nokeys")]) == 6
    assert cli.main(["run-gesture", "--set", "gesture.fc_dims=10,5"]) == 5


def test_keygen_then_wrong_params(tmp_path, out):
    keys = tmp_path / "keys"
    code = cli.main(["keygen", "--keys", str(keys), "--set", "ckks.n=1024", "--vitals-shape", "64,1,16,1"])
    assert code == 0
    assert (keys / "eval.keys").exists() and (keys / "secret.key").exists()
    assert cli.main(["run-vitals", "--backend", "ckks", "--keys", str(keys), "--set", "ckks.n=2048"]) == 6


def test_keys_missing_rotation(tmp_path, out):
    keys = tmp_path / "keys"
    cube_path = tmp_path / "v.cube"
    cli.main(["synth", "--kind", "vitals", "--frames", "64", "--output", str(cube_path)])
    cli.main(["keygen", "--keys", str(keys), "--set", "ckks.n=1024", "--vitals-shape", "64,1,8,1"])
    code = cli.main(["run-vitals", "--backend", "ckks", "--keys", str(keys), "--input", str(cube_path),
                     "--set", "ckks.n=1024"])
    assert code == 6


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        cli.main(["nope"])
