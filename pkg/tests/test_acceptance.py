"""
End-to-end acceptance at the production resolution (128^2 for the flow
scenarios). Every criterion appends one PASS/FAIL line, shown in the pytest
terminal summary and printed to stdout. The whole module takes about twenty
minutes on one core.
"""

from pathlib import Path

import numpy as np
import pytest

from patchflow import harness
from patchflow.config import load_config
from patchflow.divergence_solver import solve_divergence
from patchflow.grid import (
    cell_inner,
    divergence,
    face_inner,
    gradient,
    has_zero_wall_faces,
    laplacian_dirichlet,
    make_grid,
    poincare_constant,
    velocity_from_stream_function,
    zero_wall_faces,
)
from patchflow.lagrangian import FlowMap, FlowTracker, VelocityHistory, cofactor_matrix, delta_A_2d, \
    lagrangian_density_residual, seed_positions
from patchflow.metrics import h1_seminorm, neg_sobolev_norm
from patchflow.ns_solver import SchemeParams, advance, make_initial_velocity, make_state
from patchflow.transport import Disk, PatchSpec, advect_density, lp_norm, make_patch

CONFIGS = Path(__file__).parents[1] / "configs"
SCENARIOS = ("single_eigenmode", "single_vacuum", "pair_disjoint", "triple_disjoint")
SWEEPS = ("sweep_density", "sweep_velocity")


def _record(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    log.append(line)
    return ok


def _order(errs, ns):
    return float(np.polyfit(np.log(1.0 / np.asarray(ns)), np.log(errs), 1)[0])


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def scenarios(outdir):
    return {name: harness.run_scenario(load_config(CONFIGS / f"{name}.yaml"), outdir / name)
            for name in SCENARIOS}


@pytest.fixture(scope="module")
def sweeps(outdir):
    return {name: harness.run_sweep(load_config(CONFIGS / f"{name}.yaml"), outdir / name)
            for name in SWEEPS}


def _named(checks, *suffixes):
    return [c for c in checks if c.name.split(".")[-1] in suffixes]


def test_criterion_1_operators(acceptance_log):
    rng = np.random.default_rng(0)
    g = make_grid(37, 29, 1.3, 0.9)
    p = rng.standard_normal(g.shape)
    vel = zero_wall_faces((rng.standard_normal(g.u_shape), rng.standard_normal(g.v_shape)))
    grad = gradient(p, g)
    lhs, rhs = face_inner(grad, vel, g), -cell_inner(p, divergence(vel, g), g)
    adj = abs(lhs - rhs) / face_inner((np.abs(grad[0]), np.abs(grad[1])), (np.abs(vel[0]), np.abs(vel[1])), g)

    ns = [16, 32, 64, 128]
    e_div, e_grad, e_lap = [], [], []
    for n in ns:
        g = make_grid(n, n)
        xc, yc = g.centers()
        xu, yu = g.u_points()
        xv, yv = g.v_points()
        d = divergence((np.sin(np.pi * xu) * np.cos(np.pi * yu), np.zeros(g.v_shape)), g)
        e_div.append(np.abs(d - np.pi * np.cos(np.pi * xc) * np.cos(np.pi * yc)).max())
        gx, gy = gradient(np.cos(np.pi * xc) * np.cos(np.pi * yc), g)
        e_grad.append(max(np.abs(gx + np.pi * np.sin(np.pi * xu) * np.cos(np.pi * yu))[1:-1].max(),
                          np.abs(gy + np.pi * np.cos(np.pi * xv) * np.sin(np.pi * yv))[:, 1:-1].max()))
        u = np.sin(np.pi * xu) * np.sin(np.pi * yu)
        lu, _ = laplacian_dirichlet((u, np.zeros(g.v_shape)), g)
        e_lap.append(np.abs(lu + 2 * np.pi**2 * u).max())
    orders = [_order(e, ns) for e in (e_div, e_grad, e_lap)]
    ok = adj <= 1e-12 and min(orders) >= 1.9
    assert _record(acceptance_log, 1, ok, f"adjointness {adj:.2e} <= 1e-12; orders div/grad/lap "
                   + "/".join(f"{o:.3f}" for o in orders) + " >= 1.9")


def test_criterion_2_poincare_constant(acceptance_log):
    cp = poincare_constant(make_grid(128, 128)).poincare_constant
    rel = abs(cp * np.pi * np.sqrt(2) - 1)
    assert _record(acceptance_log, 2, rel < 5e-3, f"C_P = {cp:.6f}, relative error {rel:.2e} < 5e-3")


def test_criterion_3_energy_law(scenarios, sweeps, acceptance_log):
    checks = [c for o in scenarios.values() for c in o.checks]
    checks += [c for s in sweeps.values() for c in s.checks]
    law = _named(checks, "energy_step", "decay_kinetic", "decay_scheme")
    eps = [c for c in checks if c.name == "eps_vac_sensitivity"]
    failed = [c.name for c in law + eps if not c.passed]
    worst = max(c.lhs for c in _named(checks, "energy_step"))
    ratio = max(c.lhs for c in _named(checks, "decay_kinetic", "decay_scheme"))
    ok = not failed and len(eps) == 1
    assert _record(acceptance_log, 3, ok, f"{len(law)} energy checks over all scenarios; max step change "
                   f"{worst:.2e} <= 1e-10; max decay ratio {ratio:.3f} <= 1.05; "
                   f"eps_vac/10 rate change {eps[0].lhs:.2e} < 0.02" + (f"; failed {failed}" if failed else ""))


def test_criterion_4_gradient_decay(scenarios, acceptance_log):
    checks = scenarios["single_eigenmode"].checks + scenarios["single_vacuum"].checks
    rates = _named(checks, "grad_rate")
    sat = [c for c in checks if "saturation" in c.name]
    ok = len(rates) == 2 and len(sat) == 6 and all(c.passed for c in rates + sat)
    assert _record(acceptance_log, 4, ok, "grad rates " + ", ".join(f"{c.rhs:.3f}" for c in rates)
                   + " > 0; max tail share " + f"{max(c.lhs for c in sat):.2e} < 0.01")


def test_criterion_5_density_transport(scenarios, acceptance_log):
    checks = [c for o in scenarios.values() for c in o.checks]
    inv = _named(checks, "density_bounds", "mass_drift")
    drift = max(c.lhs for c in _named(inv, "mass_drift"))

    g = make_grid(64, 64)
    rho = make_patch(PatchSpec((Disk((0.4, 0.5), 0.2, 1.0),), 0.0), g)
    s = make_state(rho, make_initial_velocity("stokes_eigenmode", g), 0.05, g)
    norms = [[lp_norm(s.rho, p, g) for p in (2, 4, np.inf)]]
    for _ in range(300):
        s, _ = advance(s, SchemeParams())
        norms.append([lp_norm(s.rho, p, g) for p in (2, 4, np.inf)])
    norms = np.array(norms)
    lp_ok = bool(np.all(norms[1:] <= norms[:-1] * (1 + 1e-12)))

    res = []
    for n in (64, 128, 256):
        g = make_grid(n, n)
        xn, yn = g.nodes()
        psi = 0.15**2 * np.pi * np.exp(-((xn - 0.5) ** 2 + (yn - 0.5) ** 2) / 0.15**2)
        psi[[0, -1], :] = 0.0
        psi[:, [0, -1]] = 0.0
        vel = velocity_from_stream_function(psi, g)
        rho0 = make_patch(PatchSpec((Disk((0.6, 0.5), 0.08, 1.0),)), g)
        rho = rho0.copy()
        steps = n // 2
        tracker = FlowTracker(g)
        hist = VelocityHistory.step(vel, vel, 0.0, 0.5, g)
        for k in range(steps):
            rho = advect_density(rho, vel, 0.5 / steps, g)
            tracker.advance(hist, k * 0.5 / steps, (k + 1) * 0.5 / steps)
        res.append(lagrangian_density_residual(rho, rho0, tracker.snapshot()))
    ok = all(c.passed for c in inv) and lp_ok and res[0] > res[1] > res[2]
    assert _record(acceptance_log, 5, ok, f"bounds exact; mass drift {drift:.1e}; L2/L4/Linf monotone "
                   f"{lp_ok}; Lagrangian residual " + " > ".join(f"{r:.3e}" for r in res))


def test_criterion_6_flow_map(acceptance_log):
    errs = []
    for n in (32, 64, 128):
        g = make_grid(n, n)
        xn, yn = g.nodes()
        psi = np.pi * 0.15**2 * np.exp(-((xn - 0.5) ** 2 + (yn - 0.5) ** 2) / 0.15**2)
        psi[[0, -1], :] = 0.0
        psi[:, [0, -1]] = 0.0
        vel = velocity_from_stream_function(psi, g)
        tracker = FlowTracker(g)
        hist = VelocityHistory.step(vel, vel, 0.0, 1.0, g)
        ts = np.linspace(0.0, 1.0, n + 1)
        for a, b in zip(ts[:-1], ts[1:]):
            tracker.advance(hist, a, b)
        errs.append(tracker.snapshot().max_det_error())
    order = min(np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2]))

    g = make_grid(16, 16)
    rng = np.random.default_rng(7)
    X = seed_positions(g)
    fm1 = FlowMap(X, 0.3 * rng.standard_normal(g.shape + (2, 2)), 1.0, g)
    fm2 = FlowMap(X, 0.3 * rng.standard_normal(g.shape + (2, 2)), 1.0, g)
    da = np.abs(delta_A_2d(fm1, fm2) - (cofactor_matrix(fm1) - cofactor_matrix(fm2))).max()
    ok = order >= 1.5 and da <= 1e-12
    assert _record(acceptance_log, 6, ok, "det errors " + ", ".join(f"{e:.2e}" for e in errs)
                   + f", order {order:.2f} >= 1.5; delta A mismatch {da:.1e} <= 1e-12")


def test_criterion_7_divergence_solver(acceptance_log):
    ratios, resid, walls = [], [], True
    for n in (64, 128, 256):
        g = make_grid(n, n)
        x, y = g.centers()
        f = np.cos(np.pi * x) * np.cos(2 * np.pi * y)
        sol = solve_divergence(f, g)
        resid.append(sol.residual)
        walls &= has_zero_wall_faces(sol.b)
        ratios.append(h1_seminorm(sol.b, g) / neg_sobolev_norm(f, 2, g).value)
    spread = (max(ratios) - min(ratios)) / min(ratios)
    ok = max(resid) <= 1e-8 and walls and spread < 0.2
    assert _record(acceptance_log, 7, ok, f"max residual {max(resid):.1e} <= 1e-8; zero wall faces {walls}; "
                   f"stability ratios " + ", ".join(f"{r:.3f}" for r in ratios) + f", spread {spread:.3f} < 0.2")


def test_criterion_8_negative_norm(acceptance_log):
    g = make_grid(256, 256)
    x, _ = g.centers()
    const = neg_sobolev_norm(np.full(g.shape, 0.7), 2, g).value
    cos = neg_sobolev_norm(np.cos(np.pi * x), 2, g).value
    e1 = abs(const / 0.7 - 1)
    e2 = abs(cos * np.sqrt(2 * (1 + np.pi**2)) - 1)
    ok = e1 < 0.01 and e2 < 0.01
    assert _record(acceptance_log, 8, ok, f"constant rel error {e1:.1e}, cos(pi x) rel error {e2:.1e} < 0.01")


def test_criterion_9_stability_scaling(sweeps, acceptance_log):
    dens, vel = sweeps["sweep_density"], sweeps["sweep_velocity"]
    ok = dens.passed and vel.passed
    assert _record(acceptance_log, 9, ok,
                   f"density slopes sup_drho_neg {dens.slopes['sup_drho_neg']:.3f}, "
                   f"int_grad_dv {dens.slopes['int_grad_dv']:.3f} >= 0.45; velocity slopes "
                   f"lhs_lagrangian {vel.slopes['lhs_lagrangian']:.3f}, int_grad_dv "
                   f"{vel.slopes['int_grad_dv']:.3f} in 1 +- 0.1; all member checks pass")


def test_criterion_10_intermediate_triple(scenarios, acceptance_log):
    out = scenarios["triple_disjoint"]
    tri = {c.name: c for c in out.checks if c.name.startswith("triple.")}
    direct = out.reports[(0, 1)]
    ok = out.passed and len(tri) == 5
    assert _record(acceptance_log, 10, ok,
                   f"X-norms {out.reports[(0, 2)]['x_norm']:.3f}, {out.reports[(1, 2)]['x_norm']:.3f} finite "
                   f"(direct pair infinite: {direct['x_norm_infinite'] == 1}); dvr {tri['triple.dvr'].lhs:.3f} <= "
                   f"{tri['triple.dvr'].rhs:.3f}; triangle {tri['triple.triangle_lagrangian'].lhs:.3f} <= "
                   f"{tri['triple.triangle_lagrangian'].rhs:.3f}")


def test_criterion_11_determinism(scenarios, outdir, acceptance_log):
    harness.run_scenario(load_config(CONFIGS / "pair_disjoint.yaml"), outdir / "pair_again")
    names = sorted(p.name for p in (outdir / "pair_disjoint").glob("*.csv"))
    same = [(outdir / "pair_disjoint" / n).read_bytes() == (outdir / "pair_again" / n).read_bytes()
            for n in names]
    ok = len(names) >= 6 and all(same)
    assert _record(acceptance_log, 11, ok, f"{sum(same)}/{len(names)} CSV files bitwise identical on rerun")
