from __future__ import annotations

import subprocess
import sys

import pytest

from bec import cli


def test_roundtrips_to_stdout(capsys):
    assert cli.main(["roundtrips", "--protocol", "bloom", "--sweep", "1,2", "--pairs-recons", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "protocol,updates_per_interval,mean_round_trips,p_one_rt,p_two_rt,p_three_plus_rt"
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["bloom", "1"], ["bloom", "2"]]


def test_bandwidth_to_file_is_reproducible(tmp_path):
    outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for out in outs:
        assert cli.main(["bandwidth", "--sweep", "2", "--pairs-recons", "3", "--seed", "5", "--out", str(out)]) == 0
    text = outs[0].read_text()
    assert text == outs[1].read_text()
    assert text.splitlines()[0] == "protocol,updates_per_interval,mean_kb,optimal_kb"
    assert [ln.split(",")[0] for ln in text.splitlines()[1:]] == ["basic", "bloom"]


@pytest.mark.parametrize("sweep", ["0", "1,x", ""])
def test_bad_sweep_is_a_usage_error(sweep):
    with pytest.raises(SystemExit) as exc:
        cli.main(["roundtrips", "--sweep", sweep])
    assert exc.value.code == 2


def test_bad_replica_count_is_config_error(capsys):
    assert cli.main(["roundtrips", "--replicas", "1"]) == 2
    assert "bec:" in capsys.readouterr().err


def test_run_scenario(tmp_path, capsys):
    path = tmp_path / "s.txt"
    path.write_text("replicas = 3\nintervals = 2\nadversary.2 = heads_omitter\n")
    assert cli.main(["run", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "pair,round_trips,bytes,new_msgs,completed" and len(lines) == 7


def test_run_reports_property_violation(tmp_path, capsys):
    path = tmp_path / "s.txt"
    path.write_text("replicas = 3\nintervals = 4\nadversary.2 = signature_forger\ncheck_signatures = false\n")
    assert cli.main(["run", str(path)]) == 1
    assert "authenticity" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["replicas = lots\n", "nonsense\n"])
def test_run_bad_scenario_exits_2(tmp_path, text):
    path = tmp_path / "s.txt"
    path.write_text(text)
    assert cli.main(["run", str(path)]) == 2
    assert cli.main(["run", str(tmp_path / "missing.txt")]) == 2


def test_verify_passes(capsys):
    assert cli.main(["verify", "--seeds", "1", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert "matrix equivocator" in out and "FAILED" not in out


def test_verify_exit_code_on_failure(monkeypatch, capsys):
    monkeypatch.setattr(cli, "verify_all", lambda **kw: {"commutativity": ["trial 0: 2 states"], "other": []})
    assert cli.main(["verify"]) == 1
    assert "FAILED (1)" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "bec.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "roundtrips" in proc.stdout
