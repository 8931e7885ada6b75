import subprocess
import sys

import pytest
import yaml

from patchflow.cli import main

SMALL = {
    "grid": {"nx": 16, "ny": 16},
    "density": {"background": 0.0, "shapes": [{"disk": {"center": [0.5, 0.5], "radius": 0.25}}]},
    "velocity": {"kind": "stokes_eigenmode"},
    "time": {"t_end": 0.2},
}


def _write(tmp_path, **extra):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({**SMALL, **extra}))
    return path


def test_eig_reports_rate(capsys):
    assert main(["eig"]) == 0
    out = capsys.readouterr().out
    beta1 = float(out.split("beta1 = ")[1].split()[0])
    assert beta1 == pytest.approx(1.9738, rel=1e-4)
    assert "t_end(auto) = 3.49" in out


def test_run_then_verify(tmp_path, capsys):
    cfg = _write(tmp_path, scenario="single")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    assert "overall: PASS" in capsys.readouterr().out
    assert main(["verify", str(tmp_path / "out")]) == 0
    assert "stored verdicts reproduced" in capsys.readouterr().out


def test_pair_output_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PATCHFLOW_OUT", str(tmp_path / "env"))
    cfg = _write(tmp_path, scenario="pair",
                 perturbation={"velocity": {"kind": "stream_function", "amplitude": 0.01}})
    assert main(["pair", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "pair" / "report_0_1.csv").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, scenario="single", grid={"nx": 4, "ny": 16, "nz": 3})
    assert main(["run", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "unknown key 'nz'" in err and "at least 8 cells" in err


def test_scenario_mismatch_exit_2(tmp_path):
    assert main(["sweep", "--config", str(_write(tmp_path, scenario="pair"))]) == 2


def test_missing_run_exit_3(tmp_path):
    assert main(["verify", str(tmp_path / "nothing")]) == 3


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "patchflow.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify" in res.stdout
