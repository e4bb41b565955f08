import csv
import hashlib
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from adjauto.cli import main
from adjauto.model import format_strategy, parse_strategy

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text(encoding="utf-8"))))


def test_eval_writes_breakdown(tmp_path):
    assert main(["eval", "--scenario", str(SCEN / "meeting.json"), "--strategy", "U(8)D(5)A", "--out-dir", str(tmp_path)]) == 0
    [row] = _rows(tmp_path / "eval.csv")
    assert row["strategy"] == "U(8)D(5)A"
    assert float(row["total"]) == pytest.approx(float(row["segment_1_eu"]) + float(row["segment_2_eu"]), abs=1e-9)


def test_strategy_may_come_from_a_file(tmp_path):
    f = tmp_path / "s.txt"
    f.write_text("U(8)A\n", encoding="utf-8")
    assert main(["eval", "--scenario", str(SCEN / "meeting.json"), "--strategy", str(f), "--out-dir", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "eval.manifest.json").read_text())
    assert str(f) in man["inputs"]


def test_fig10_low_wait_rate_prefers_single_action(tmp_path):
    assert main(["experiment", "fig10", "--seed", "7", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "fig10.csv")
    low = min(float(r["wait_rate_bucket"]) for r in rows)
    bucket = {int(r["length"]): float(r["percentage"]) for r in rows if float(r["wait_rate_bucket"]) == low}
    assert max(bucket, key=bucket.get) == 1


def test_solve_then_verify(tmp_path):
    cons = str(SCEN / "delay_constraints.json")
    assert main(["solve", "--mdp", str(SCEN / "delay.json"), "--constraints", cons, "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "policy.csv")
    assert {"F", "N", "action", "U"} <= set(rows[0])
    assert main(["verify", "--mdp", str(SCEN / "delay.json"), "--constraints", cons, "--out-dir", str(tmp_path)]) == 0
    assert {r["status"] for r in _rows(tmp_path / "verify.csv")} == {"satisfied"}


def test_manifest_digests_match_files(tmp_path):
    assert main(["build", "--mdp", str(SCEN / "abstract.json"), "--out-dir", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "build.manifest.json").read_text())
    for table in (man["inputs"], man["outputs"]):
        for path, digest in table.items():
            assert hashlib.sha256(Path(path).read_bytes()).hexdigest() == digest
    assert man["command"][0] == "build" and man["backend"] in ("compiled", "pure")


def test_outputs_use_lf_only(tmp_path):
    assert main(["census", "--out-dir", str(tmp_path)]) == 0
    for p in tmp_path.iterdir():
        assert b"\r" not in p.read_bytes()


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["simulate", "--mdp", str(SCEN / "delay.json"), "--seed", "4", "--trials", "300", "--out-dir", str(d)]) == 0
    for name in ("simulation.csv", "lengths.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_search_lists_skeletons(tmp_path):
    assert main(["search", "--scenario", str(SCEN / "meeting.json"), "--max-len", "2", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "search.csv")
    vals = [float(r["eu"]) for r in rows]
    assert vals == sorted(vals, reverse=True)


def test_sweep_names_file_after_parameter(tmp_path):
    assert main(["sweep", "--param", "response_mean", "--values", "5,60", "--out-dir", str(tmp_path)]) == 0
    assert len(_rows(tmp_path / "sweep_response_mean.csv")) == 2


@pytest.mark.parametrize("text", ["U(8)A", "U(8)D(5)A", "U(2.5)D(1)D(2)U(7)A", "A"])
def test_strategy_text_round_trip(text):
    assert format_strategy(parse_strategy(text, ["A", "U"])) == text


@pytest.mark.parametrize(
    "argv",
    [
        ["teleport"],
        ["eval", "--frobnicate"],
        ["eval", "--scenario", "/nonexistent.json", "--strategy", "A"],
        ["eval", "--scenario", str(SCEN / "meeting.json"), "--strategy", "U(5"],
        ["eval", "--scenario", str(SCEN / "meeting.json")],
        ["solve", "--mdp", str(SCEN / "meeting.json")],
        ["simulate", "--trials", "0"],
    ],
)
def test_bad_input_exits_two(tmp_path, argv):
    assert main(argv + ["--out-dir", str(tmp_path)] if argv[0] != "teleport" else argv) == 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "eval" in capsys.readouterr().out


def test_console_script_exit_status(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adjauto.cli", "nope"], capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
