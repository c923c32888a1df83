import csv
import io
import json
import subprocess
import sys

import pytest

from mmtc_sim import cli
from mmtc_sim.config import SystemConfig


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.cfg"
    cfg = SystemConfig(n_devices=30, n_antennas=8, pilot_len=10, coherence_len=10, activity_prob=0.1,
                       power_policy="sci")
    path.write_text(cfg.to_text())
    return path


def test_figure_to_stdout(capsys):
    assert cli.main(["figure", "fig2", "--trials", "2", "--seed", "3"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["sweep_value"] for r in rows} == {"5", "10", "15", "20", "25"}
    assert all(r["n_trials"] == "2" for r in rows)


def test_figure_json_file(tmp_path):
    out = tmp_path / "r.json"
    assert cli.main(["figure", "fig6", "--trials", "2", "--format", "json", "--out", str(out)]) == 0
    assert json.loads(out.read_text())[0]["sweep_param"] == "n_antennas"


def test_sweep(cfg_file, capsys):
    assert cli.main(["sweep", "--config", str(cfg_file), "--param", "pilot_len", "--values", "8,10",
                     "--trials", "2", "--decision", "energy"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["metric"] for r in rows} == {"amp:miss_rate", "amp:false_alarm_rate", "amp:failure_rate"}


def test_sweep_mamp(cfg_file, capsys):
    text = cfg_file.read_text().replace("info_bits = 0", "info_bits = 1")
    cfg_file.write_text(text)
    assert cli.main(["sweep", "--config", str(cfg_file), "--param", "n_antennas", "--values", "4 8",
                     "--trials", "1"]) == 0
    assert "mamp:message_error_rate" in capsys.readouterr().out


def test_detect(cfg_file, capsys):
    assert cli.main(["detect", "--config", str(cfg_file), "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("iteration,residual_fro,mu2\n")
    assert "# active devices:" in out and "# missed:" in out


def test_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["figure", "fig99"]) == 2
    assert "unknown figure" in capsys.readouterr().err
    assert cli.main(["detect", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_devices = -3\n")
    assert cli.main(["sweep", "--config", str(bad), "--param", "pilot_len", "--values", "5"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["sweep", "--config", str(bad), "--param", "pilot_len", "--values", ""])


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "mmtc_sim.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "figure" in proc.stdout
