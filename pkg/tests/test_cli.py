"""Command line contract: exit codes, stdout JSON, stderr error records."""

import json
import subprocess
import sys

import pytest

from fleetlab.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_baseline_subcommand(capsys):
    code, out, err = run_cli(capsys, "baseline", "--name", "mpdm-random",
                             "--domain", "regional", "--variant", "low",
                             "--n-drivers", "2", "--episodes", "2")
    assert code == 0 and err == ""
    result = json.loads(out)
    assert result["source"] == "mpdm-random"
    assert len(result["returns"]) == 2


def test_eval_baseline_matches_baseline_subcommand(capsys):
    a = run_cli(capsys, "eval", "--baseline", "mrm-demand", "--domain", "hotcold",
                "--variant", "low", "--n-drivers", "2", "--episodes", "2")
    b = run_cli(capsys, "baseline", "--name", "mrm-demand", "--domain", "hotcold",
                "--variant", "low", "--n-drivers", "2", "--episodes", "2")
    assert a[0] == b[0] == 0
    assert json.loads(a[1]) == json.loads(b[1])


def test_gen_data_and_report(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "gen-data", "--seed", "7", "--days", "2",
                           "--daily-orders", "50", "--out", str(tmp_path / "data"))
    assert code == 0
    paths = json.loads(out)
    assert (tmp_path / "data" / "orders.csv").exists()
    assert paths["rates"].endswith("rates.grid")

    arrows = tmp_path / "arrows.csv"
    code, out, _ = run_cli(capsys, "report", "--baseline", "mpdm-demand",
                           "--domain", "hotcold", "--variant", "low",
                           "--n-drivers", "2", "--episodes", "1",
                           "--out", str(arrows))
    assert code == 0
    assert json.loads(out)["rows"] >= 1
    assert arrows.read_text().startswith("# arrows-v1\n")


def test_train_and_eval_checkpoint(capsys, tmp_path):
    code, out, err = run_cli(
        capsys, "train", "--domain", "regional", "--variant", "low",
        "--algo", "dqn", "--seeds", "0", "--budget", "1", "--eval-every", "1",
        "--eval-episodes", "2", "--n-drivers", "2",
        "--set", "trainer.batch_size=8", "--out", str(tmp_path / "run"))
    assert code == 0, err
    summary = json.loads(out)
    assert summary["algo"] == "dqn"
    best = tmp_path / "run" / "seed0" / "best.ckpt"
    assert best.exists()

    code, out, err = run_cli(capsys, "eval", "--policy", str(best), "--domain",
                             "regional", "--variant", "low", "--n-drivers", "2",
                             "--episodes", "2", "--out", str(tmp_path / "eval.json"))
    assert code == 0, err
    assert json.loads(out) == json.loads((tmp_path / "eval.json").read_text())


@pytest.mark.parametrize("argv", [
    ("baseline", "--name", "mpdm-random", "--domain", "atlantis"),
    ("baseline", "--domain", "regional"),  # missing --name
    ("eval", "--domain", "regional"),  # needs --policy or --baseline
    ("eval", "--policy", "a", "--baseline", "b", "--domain", "regional"),
    ("train", "--set", "garbage", "--domain", "regional"),
    ("train",),  # no domain anywhere
    ("gen-data", "--seed", "1", "--days", "0", "--out", "x"),
])
def test_failures_emit_json_errors(capsys, argv):
    code, out, err = run_cli(capsys, *argv)
    assert code == 1
    record = json.loads(err)
    assert record["error"] and record["message"]


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "fleetlab", "baseline", "--name", "mpdm-simple",
         "--domain", "regional", "--variant", "low", "--n-drivers", "2",
         "--episodes", "1", "--simple-mode"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["episodes"] == 1
