import numpy as np
import pytest

from patchflow import harness
from patchflow.config import parse_config
from patchflow.errors import ConfigError
from patchflow.series import TimeSeries

DISK_A = {"disk": {"center": [0.3, 0.5], "radius": 0.15}, "level": 1.0}
DISK_B = {"disk": {"center": [0.7, 0.5], "radius": 0.15}, "level": 0.5}


def _cfg(scenario="single", velocity=None, t_end=0.2, n=16, **extra):
    doc = {
        "scenario": scenario,
        "grid": {"nx": n, "ny": n},
        "density": {"background": 0.0, "shapes": [DISK_A]},
        "velocity": velocity or {"kind": "stokes_eigenmode", "amplitude": 1.0},
        "time": {"t_end": t_end, "cadence": 5},
    }
    doc.update(extra)
    return parse_config(doc)


def test_fluid_at_rest_passes_trivially(tmp_path):
    out = harness.run_single(_cfg(velocity={"kind": "zero"}, t_end=0.1), tmp_path)
    assert out.passed
    ts = TimeSeries.from_csv(tmp_path / "member0.csv")
    assert np.all(ts["kinetic_energy"] == 0.0)


def test_single_run_artifacts_and_verify(tmp_path):
    out = harness.run_single(_cfg(t_end=0.3), tmp_path)
    assert out.passed, harness.format_checks(out.checks)
    for name in ("config.yaml", "checks.csv", "member0.csv", "energy_member0.csv", "report.txt"):
        assert (tmp_path / name).exists()
    assert "overall: PASS" in (tmp_path / "report.txt").read_text()
    checks, consistent = harness.verify(tmp_path)
    assert consistent and all(c.passed for c in checks)


def test_verify_detects_tampering(tmp_path):
    harness.run_single(_cfg(t_end=0.2), tmp_path)
    stored = harness.read_checks(tmp_path / "checks.csv")
    stored[0] = stored[0]._replace(lhs=stored[0].lhs + 1.0)
    harness.write_checks(tmp_path / "checks.csv", stored)
    assert not harness.verify(tmp_path)[1]


def test_identical_members_give_zero_report(tmp_path):
    out = harness.run_pair(_cfg("pair"), tmp_path)
    rep = out.reports[(0, 1)]
    for key in ("sup_weighted_du", "int_grad_du", "int_grad_dv", "sup_drho_neg", "lhs_lagrangian",
                "lhs_eulerian", "data_functional"):
        assert rep[key] == 0.0, key


def test_disjoint_pair_flags_infinite_x_norm(tmp_path):
    cfg = _cfg("pair", perturbation={"shapes": [DISK_B], "target": "first"})
    out = harness.run_pair(cfg, tmp_path)
    rep = out.reports[(0, 1)]
    assert rep["x_norm"] == np.inf and rep["x_norm_infinite"] == 1
    assert np.isfinite(rep["lhs_lagrangian"]) and rep["lhs_lagrangian"] > 0
    assert "intermediate_triple" in (tmp_path / "report.txt").read_text()
    assert out.passed, harness.format_checks(out.checks)


def test_velocity_only_pair(tmp_path):
    cfg = _cfg("pair", perturbation={"velocity": {"kind": "stream_function", "amplitude": 0.01}})
    rep = harness.run_pair(cfg, tmp_path).reports[(0, 1)]
    # the densities start equal and separate only through the velocity difference
    assert rep["drho0_l2"] == 0.0 and rep["sup_drho_neg"] < 0.1 * rep["dv0_weighted"]
    assert rep["data_functional"] == pytest.approx(rep["dv0_weighted"]) and rep["dv0_weighted"] > 0
    assert rep["lhs_lagrangian"] > 0


def test_triple_of_disjoint_patches(tmp_path):
    cfg = _cfg("intermediate_triple", perturbation={"shapes": [DISK_B], "target": "first"})
    out = harness.run_intermediate_triple(cfg, tmp_path)
    assert set(out.reports) == {(0, 2), (1, 2), (0, 1)}
    assert np.isfinite(out.reports[(0, 2)]["x_norm"]) and np.isfinite(out.reports[(1, 2)]["x_norm"])
    assert out.passed, harness.format_checks(out.checks)
    assert harness.verify(tmp_path)[1]


def test_triple_of_identical_members(tmp_path):
    out = harness.run_intermediate_triple(_cfg("intermediate_triple"), tmp_path)
    for rep in out.reports.values():
        assert rep["lhs_lagrangian"] == 0.0 and rep["x_norm"] == 0.0


def test_runs_are_deterministic(tmp_path):
    cfg = _cfg("pair", perturbation={"shapes": [DISK_B]})
    harness.run_pair(cfg, tmp_path / "a")
    harness.run_pair(cfg, tmp_path / "b")
    for name in ("member0.csv", "member1.csv", "pair_0_1.csv", "checks.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_wrong_scenario_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        harness.run_pair(_cfg("single"), tmp_path)
    with pytest.raises(ConfigError):
        harness.run_sweep(_cfg("pair"), tmp_path)


def _sweep_cfg(amps=(0.1, 0.2, 0.5, 1.0)):
    return _cfg("sweep", t_end=0.1,
                density={"background": 0.0,
                         "shapes": [{"disk": {"center": [0.5, 0.5], "radius": 0.3}, "level": 0.5}]},
                perturbation={"shapes": [{"disk": {"center": [0.6, 0.5], "radius": 0.12}, "level": 0.5}]},
                sweep={"kind": "density", "amplitudes": list(amps)})


def test_sweep_with_zero_amplitudes_is_rejected(tmp_path):
    cfg = _sweep_cfg()
    from dataclasses import replace
    bad = replace(cfg, sweep=replace(cfg.sweep, amplitudes=(0.0, 0.0, 0.0, 0.0)))
    with pytest.raises(ConfigError):
        harness.run_sweep(bad, tmp_path)


def test_sweep_parallel_matches_sequential(tmp_path):
    cfg = _sweep_cfg()
    seq = harness.run_sweep(cfg, tmp_path / "seq", threads=1)
    par = harness.run_sweep(cfg, tmp_path / "par", threads=2)
    assert (tmp_path / "seq" / "sweep.csv").read_bytes() == (tmp_path / "par" / "sweep.csv").read_bytes()
    assert seq.slopes == par.slopes
    assert [r["drho0_l2"] for r in seq.reports] == sorted(r["drho0_l2"] for r in seq.reports)
    checks, consistent = harness.verify(tmp_path / "seq")
    assert consistent and len(checks) == len(seq.checks)


def test_loglog_slope():
    x = np.array([0.1, 0.2, 0.5, 1.0])
    assert harness.loglog_slope(x, 3 * x**1.5) == pytest.approx(1.5)
    assert np.isnan(harness.loglog_slope(x, x - 0.1))
    with pytest.raises(ValueError):
        harness.loglog_slope(x[:3], x[:3])


def test_tail_fraction():
    t = np.linspace(0, 1, 1001)
    expected = (np.exp(-0.5) - np.exp(-1)) / (1 - np.exp(-1))
    assert harness.tail_fraction(t, np.exp(-t), 0.5, 1.0) == pytest.approx(expected, rel=1e-5)
    assert harness.tail_fraction(t, np.zeros_like(t), 0.5, 1.0) == 0.0


def test_saturation_checks_need_the_full_window(tmp_path):
    short = harness.run_single(_cfg(t_end=0.2, time={"t_end": 0.2, "t_end_factor": 0.5}), tmp_path / "a")
    assert not any("saturation" in c.name for c in short.checks)
    full = harness.run_single(_cfg(time={"t_end": 0.4, "t_end_factor": 2.0}), tmp_path / "b")
    assert sum("saturation" in c.name for c in full.checks) == 3
