"""
Scenario orchestration: single runs, paired runs, intermediate triples and
perturbation sweeps, with their verification reports.

Every scenario writes into one output directory:

* ``config.yaml``: the effective configuration;
* ``member<k>.csv``: sampled channels of each member;
* ``energy_member<k>.csv``: the scheme energy after every step;
* ``pair_<i>_<j>.csv`` and ``report_<i>_<j>.csv``: difference channels and
  stability functionals of each compared pair (second minus first);
* ``checks.csv`` and ``report.txt``: every checked inequality with its
  measured sides and verdict;
* ``snapshots/``: field snapshots at the configured times.

Sweeps put one such directory per amplitude under ``amp<k>/`` and add
``sweep.csv``.
"""

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.integrate import trapezoid

from . import metrics
from .config import dump_config, load_config
from .errors import ConfigError
from .fieldio import write_flow_map, write_state
from .grid import make_grid, poincare_constant
from .lagrangian import (
    FlowMap,
    FlowTracker,
    VelocityHistory,
    lagrangian_velocity,
    lagrangian_velocity_gradient,
)
from .divergence_solver import decompose_difference
from .ns_solver import (
    CHANNELS,
    SchemeParams,
    advance,
    make_initial_velocity,
    make_state,
    sample_channels,
    scheme_energy,
    stable_dt,
)
from .series import TimeSeries
from .transport import make_patch

OUT_ENV = "PATCHFLOW_OUT"
ENERGY_STEP_TOL = 1e-10
DECAY_SLACK = 1.05
STARTUP_STEPS = 5
SATURATION_TOL = 0.01
TRIANGLE_SLACK = 0.05
DENSITY_SLOPE_MIN = 0.45
VELOCITY_SLOPE_TOL = 0.1
RATIO_SPREAD = 0.3


class Check(NamedTuple):
    name: str
    inequality: str
    lhs: float
    rhs: float
    passed: bool


def _check(name, inequality, lhs, rhs, passed=None):
    lhs, rhs = float(lhs), float(rhs)
    if passed is None:
        passed = lhs <= rhs
    return Check(name, inequality, lhs, rhs, bool(passed))


def write_checks(path, checks):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "inequality", "lhs", "rhs", "passed"])
        for c in checks:
            w.writerow([c.name, c.inequality, "%.17g" % c.lhs, "%.17g" % c.rhs, int(c.passed)])


def read_checks(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Check(r["name"], r["inequality"], float(r["lhs"]), float(r["rhs"]), r["passed"] == "1")
            for r in rows]


def format_checks(checks):
    return "\n".join(
        f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.inequality}  (lhs={c.lhs:.6g}, rhs={c.rhs:.6g})"
        for c in checks
    )


# --- building members ---------------------------------------------------------


def domain_rate(g, mu, rho_star):
    """``(DomainConstants, beta1 = 2 mu / (rho_star C_P^2))``."""
    consts = poincare_constant(g)
    return consts, 2.0 * mu / (rho_star * consts.poincare_constant**2)


def resolve_t_end(cfg, beta1):
    tm = cfg.time
    base = math.log(1000.0) / beta1 if tm.t_end == "auto" else float(tm.t_end)
    return base * tm.t_end_factor


def scheme_params(cfg):
    return SchemeParams(**asdict(cfg.scheme))


def velocity_field(vc, g):
    if vc is None or vc.kind == "zero":
        return g.zero_vector()
    if vc.kind == "stokes_eigenmode":
        return make_initial_velocity("stokes_eigenmode", g, vc.amplitude)
    return make_initial_velocity("stream_function", g, vc.amplitude, k=vc.k, m=vc.m)


def perturbation_fields(cfg, g, density_scale=1.0, velocity_scale=1.0):
    """``(drho0, dvel0)``: shapes paint their (signed) levels over zero, later ones on top."""
    pert = cfg.perturbation
    drho = g.zero_scalar()
    x, y = g.centers()
    for shape in pert.shapes:
        drho[shape.contains(x, y)] = shape.level
    du, dv = velocity_field(pert.velocity, g)
    return density_scale * drho, (velocity_scale * du, velocity_scale * dv)


def member_data(cfg, g, density_scale=1.0, velocity_scale=1.0):
    """Initial ``(rho0, vel0)`` of every member of the scenario."""
    rho = make_patch(cfg.density, g)
    vel = velocity_field(cfg.velocity, g)
    if cfg.scenario == "single":
        return [(rho, vel)]
    drho, dvel = perturbation_fields(cfg, g, density_scale, velocity_scale)
    prho = rho + drho
    if np.min(prho) < 0 or np.max(prho) > cfg.fluid.rho_star:
        raise ConfigError(["perturbation: perturbed density leaves [0, rho_star]"])
    if not np.any(prho):
        raise ConfigError(["perturbation: perturbed density is identically zero"])
    perturbed = (prho, (vel[0] + dvel[0], vel[1] + dvel[1]))
    base = (rho, vel)
    first, second = (perturbed, base) if cfg.perturbation.target == "first" else (base, perturbed)
    members = [first, second]
    if cfg.scenario == "intermediate_triple":
        mid = metrics.intermediate_data(first[0], second[0], second[1], g)
        members.append((mid.rho0, mid.vel0))
    return members


def initial_state(cfg, member=0):
    g = make_grid(cfg.grid.nx, cfg.grid.ny, cfg.grid.lx, cfg.grid.ly)
    rho, vel = member_data(cfg, g)[member]
    return make_state(rho, vel, cfg.fluid.mu, g, cfg.fluid.rho_star), scheme_params(cfg)


# --- lockstep integration -----------------------------------------------------


@dataclass
class MembersResult:
    series: list
    pair_series: dict
    finals: list
    flow_maps: list
    energies: list
    steps: int
    rho0: list
    vel0: list


def _test_function(g):
    def phi(x, y):
        return np.cos(np.pi * x / g.lx) * np.cos(np.pi * y / g.ly)
    return phi


def _pair_sample(g, i, j, states, fms, lag, rho0, expensive, p_values, phi, step):
    si, sj = states[i], states[j]
    ui, gi = lag[i]
    uj, gj = lag[j]
    area = g.cell_area
    m = np.minimum(rho0[i], rho0[j])
    du = uj - ui
    row = {
        "t": si.t, "step": step,
        "du_weighted": float(np.sqrt(np.sum(m[..., None] * du**2) * area)),
        "grad_du": float(np.sqrt(np.sum((gj - gi) ** 2) * area)),
        "grad_dv": metrics.h1_seminorm((sj.vel[0] - si.vel[0], sj.vel[1] - si.vel[1]), g),
    }
    nan = float("nan")
    keys = ["drho_neg2", *(metrics.neg_key(p) for p in p_values), "a1", "a2", "i_phi",
            "z_weighted", "grad_wbar", "div_solver_res", "z_residual", "dq"]
    if not expensive:
        row.update({k: nan for k in keys})
        return row
    drho = sj.rho - si.rho
    row["drho_neg2"] = metrics.neg_sobolev_norm(drho, 2, g).value
    for p in p_values:
        row[metrics.neg_key(p)] = metrics.neg_sobolev_norm(drho, p, g).value
    xi, xj = fms[i].X, fms[j].X
    phi_i = phi(xi[..., 0], xi[..., 1])
    phi_j = phi(xj[..., 0], xj[..., 1])
    xc, yc = g.centers()
    row["a1"] = float(np.sum((rho0[i] - rho0[j]) * phi_i) * area)
    row["a2"] = float(np.sum(rho0[j] * (phi_i - phi_j)) * area)
    row["i_phi"] = float(np.sum((si.rho - sj.rho) * phi(xc, yc)) * area)
    dec = decompose_difference(fms[i], fms[j], si.vel, sj.vel)
    row["z_weighted"] = float(np.sqrt(np.sum(rho0[i][..., None] * dec.z**2) * area))
    row["grad_wbar"] = metrics.h1_seminorm(dec.w_bar, g)
    row["div_solver_res"] = dec.solver_residual
    row["z_residual"] = dec.z_residual
    dp = (sj.p - sj.p.mean()) - (si.p - si.p.mean())
    row["dq"] = float(np.sqrt(np.sum(dp**2) * area))
    return row


def run_members(states, sp_, t_end, pairs=(), cadence=10, p_values=(), sample_every=1,
                snapshot_times=(), out_dir=None):
    """
    Advance several solutions with a common time step (the smallest stable
    one) and, for each requested pair ``(i, j)``, sample the difference
    channels of member ``j`` minus member ``i``. Cheap channels are sampled
    every step, negative norms and the ``w + z`` split every ``cadence``
    steps and at the end.
    """
    g = states[0].grid
    states = list(states)
    series = [TimeSeries(CHANNELS) for _ in states]
    for k, s in enumerate(states):
        series[k].append(sample_channels(s, sp_, 0.0, None, 0))
    trackers = [FlowTracker(g) for _ in states] if pairs else []
    rho0 = [s.rho.copy() for s in states]
    vel0 = [(s.vel[0].copy(), s.vel[1].copy()) for s in states]
    pair_series = {pq: TimeSeries(metrics.pair_channels(p_values)) for pq in pairs}
    energies = [[scheme_energy(s, sp_)] for s in states]
    phi = _test_function(g)
    pending = sorted(float(t) for t in snapshot_times)
    snap_dir = None
    if out_dir is not None and pending:
        snap_dir = Path(out_dir) / "snapshots"
        snap_dir.mkdir(parents=True, exist_ok=True)

    def flow_maps():
        return [FlowMap(tr.X, tr.D, tr.t, g, tr.clamp_events, tr.particle_steps) for tr in trackers]

    def sample_pairs(step, expensive):
        if not pairs:
            return
        fms = flow_maps()
        lag = [(lagrangian_velocity(s.vel, fm), lagrangian_velocity_gradient(s.vel, fm))
               for s, fm in zip(states, fms)]
        for (i, j) in pairs:
            pair_series[(i, j)].append(
                _pair_sample(g, i, j, states, fms, lag, rho0, expensive, p_values, phi, step))

    def snapshot():
        while pending and pending[0] <= states[0].t + 1e-12:
            t_snap = pending.pop(0)
            if snap_dir is not None:
                for k, s in enumerate(states):
                    write_state(snap_dir, f"member{k}_t{t_snap:g}", s)
                for k, fm in enumerate(flow_maps()):
                    write_flow_map(snap_dir, f"flow{k}_t{t_snap:g}", fm)

    sample_pairs(0, True)
    snapshot()
    nsteps = 0
    tol = 1e-12 * max(1.0, t_end)
    try:
        while states[0].t < t_end - tol:
            remaining = t_end - states[0].t
            dt = min(stable_dt(s, sp_) for s in states)
            if remaining <= dt * (1 + 1e-9):
                dt = remaining
            nsteps += 1
            done = states[0].t + dt >= t_end - tol
            for k, s in enumerate(states):
                new, info = advance(s, sp_, dt)
                if done:
                    new.t = float(t_end)
                if trackers:
                    trackers[k].advance(VelocityHistory.step(s.vel, new.vel, s.t, new.t, g), s.t, new.t)
                energies[k].append(info.energy_after)
                if nsteps % sample_every == 0 or done:
                    series[k].append(sample_channels(new, sp_, dt, s.vel, nsteps))
                states[k] = new
            sample_pairs(nsteps, nsteps % cadence == 0 or done)
            snapshot()
    finally:
        if out_dir is not None:
            _write_member_files(Path(out_dir), series, energies, pair_series)
    return MembersResult(series, pair_series, states, flow_maps() if trackers else [],
                         [np.array(e) for e in energies], nsteps, rho0, vel0)


def _write_member_files(out, series, energies, pair_series):
    out.mkdir(parents=True, exist_ok=True)
    for k, ts in enumerate(series):
        ts.to_csv(out / f"member{k}.csv")
        with open(out / f"energy_member{k}.csv", "w") as fh:
            fh.write("step,scheme_energy\n")
            for n, e in enumerate(energies[k]):
                fh.write("%d,%.17g\n" % (n, e))
    for (i, j), ts in pair_series.items():
        ts.to_csv(out / f"pair_{i}_{j}.csv")


def _read_energy(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1]


# --- single-run checks ----------------------------------------------------------


def energy_step_increase(energy):
    e = np.asarray(energy, dtype=float)
    if len(e) < 2:
        return 0.0
    prev = e[:-1]
    inc = e[1:] - prev
    rel = np.where(prev > 0, inc / np.where(prev > 0, prev, 1.0), np.where(inc > 0, np.inf, 0.0))
    return float(np.max(rel))


def decay_ratio(series, channel, beta1, skip=STARTUP_STEPS):
    t = series["t"]
    e = series[channel]
    steps = series["step"]
    keep = steps > skip
    if not np.any(keep):
        return 0.0
    if e[0] <= 0:
        return float(np.max(e[keep])) if np.max(e[keep]) > 0 else 0.0
    return float(np.max(e[keep] / (e[0] * np.exp(-beta1 * t[keep]))))


def tail_fraction(t, integrand, t0, t1):
    """Share of ``int_0^t1 integrand`` coming from ``[t0, t1]`` (trapezoid, NaNs dropped)."""
    keep = np.isfinite(integrand) & (t <= t1 * (1 + 1e-12))
    t, f = t[keep], integrand[keep]
    if len(t) < 2:
        return 0.0
    total = trapezoid(f, t)
    late = t >= t0
    tail = trapezoid(f[late], t[late]) if np.count_nonzero(late) > 1 else 0.0
    return float(tail / total) if total > 0 else 0.0


def fit_window(t_end):
    return (t_end / 3.0, t_end)


def single_checks(series, energy, beta1, rho_star, label="", t_decay=None):
    """
    Energy law, decay bound, density bounds, incompressibility and
    saturation checks of one run.

    The weighted integrals are called saturated when ``[t_decay, 2 t_decay]``
    contributes less than 1% of ``int_0^{2 t_decay}``; runs shorter than
    ``2 t_decay`` skip those checks.
    """
    tag = f"{label}." if label else ""
    t = series["t"]
    steps = int(series["step"][-1])
    checks = [
        _check(f"{tag}energy_step", "max_n (E_{n+1} - E_n) / E_n <= 1e-10",
               energy_step_increase(energy), ENERGY_STEP_TOL),
        _check(f"{tag}decay_kinetic", "max_{n>5} E(t) / (E(0) exp(-beta1 t)) <= 1.05",
               decay_ratio(series, "kinetic_energy", beta1), DECAY_SLACK),
        _check(f"{tag}decay_scheme", "max_{n>5} E_h(t) / (E_h(0) exp(-beta1 t)) <= 1.05",
               decay_ratio(series, "scheme_energy", beta1), DECAY_SLACK),
        _check(f"{tag}density_bounds", "max(-min rho, max rho - rho_star) <= 0",
               max(-float(np.min(series["rho_min"])), float(np.max(series["rho_max"])) - rho_star) + 0.0, 0.0),
    ]
    mass = series["mass"]
    drift = float(np.max(np.abs(mass - mass[0])) / mass[0])
    checks.append(_check(f"{tag}mass_drift", "max |m(t) - m(0)| / m(0) <= 1e-10 per 1000 steps",
                         drift, 1e-10 * max(1.0, steps / 1000.0)))
    checks.append(_check(f"{tag}divergence", "max |div v| <= 1e-8",
                         float(np.max(series["div_residual"])), 1e-8))
    e = series["kinetic_energy"]
    if e[0] > 0 and np.all(e > 0) and len(t) >= 10:
        g_rate = metrics.fit_decay_rate(t, series["grad_v"], fit_window(t[-1])).rate
        checks.append(_check(f"{tag}grad_rate", "0 < fitted decay rate of |grad v|_2",
                             0.0, g_rate, g_rate > 0))
    if (e[0] > 0 and np.all(e > 0) and t_decay is not None
            and t[-1] >= 2 * t_decay * (1 - 1e-9)):
        a, b = t_decay, 2 * t_decay
        bh = beta1 / 4.0
        w = np.exp(2 * bh * t)
        vt = series["sqrt_rho_vt"]
        second = w * (vt**2 + series["lap_v"] ** 2 + series["grad_p"] ** 2)
        checks.append(_check(f"{tag}saturation_second_order",
                             "share of [T, 2T] in int e^{2b t}(|sqrt(rho) v_t|^2 + |Lap v|^2 + |grad P|^2) < 0.01",
                             tail_fraction(t, second, a, b), SATURATION_TOL))
        checks.append(_check(f"{tag}saturation_time_weighted",
                             "share of [T, 2T] in int t e^{2b t} |sqrt(rho) v_t|^2 < 0.01",
                             tail_fraction(t, t * w * vt**2, a, b), SATURATION_TOL))
        checks.append(_check(f"{tag}saturation_lipschitz",
                             "share of [T, 2T] in int e^{b t} |grad v|_inf < 0.01",
                             tail_fraction(t, np.exp(bh * t) * series["grad_v_sup"], a, b), SATURATION_TOL))
    return checks


def fitted_rates(series):
    t = series["t"]
    out = {}
    if len(t) < 10:
        return out
    window = fit_window(t[-1])
    for ch in ("kinetic_energy", "grad_v", "sqrt_rho_vt", "lap_v", "grad_p", "grad_v_sup"):
        try:
            out[ch] = metrics.fit_decay_rate(t, series[ch], window).rate
        except ValueError:
            pass
    return out


def pair_beta(cfg, member_series):
    if cfg.analysis.beta != "auto":
        return float(cfg.analysis.beta)
    s = member_series
    t, e = s["t"], s["kinetic_energy"]
    if e[0] <= 0 or np.any(e <= 0) or len(t) < 10:
        return 0.0
    return metrics.fit_decay_rate(t, e, fit_window(t[-1])).rate / 4.0


def pair_checks(rep, label):
    # the X-norm and the ratios built on it are legitimately infinite for vacuum-charging data
    free = ("x_norm", "ratio_lagrangian", "ratio_eulerian")
    vals = np.array([float(v) for k, v in rep.items() if k not in free])
    bad = np.count_nonzero(~np.isfinite(vals) | (vals < 0))
    return [
        _check(f"{label}.report_finite", "number of non-finite or negative stability entries <= 0",
               bad, 0.0),
        _check(f"{label}.divergence_solver", "max |div w_bar - f|_2 <= 1e-8",
               rep["div_solver_res_max"], 1e-8),
    ]


# --- scenarios ------------------------------------------------------------------


class Outcome(NamedTuple):
    checks: list
    reports: dict
    result: object
    info: dict

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


def _out_dir(cfg, out):
    if out is not None:
        return Path(out)
    if cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(OUT_ENV, "patchflow_out")) / cfg.scenario


def _pairs_for(cfg):
    if cfg.scenario == "intermediate_triple":
        return ((0, 2), (1, 2), (0, 1))
    if cfg.scenario in ("pair", "sweep"):
        return ((0, 1),)
    return ()


def evaluate(cfg, series, energies, pair_series, rho0, vel0, g, beta1, t_end):
    """All checks and reports of a finished (or reloaded) scenario."""
    checks = []
    for k, ts in enumerate(series):
        checks += single_checks(ts, energies[k], beta1, cfg.fluid.rho_star,
                                label=f"member{k}" if len(series) > 1 else "",
                                t_decay=t_end / cfg.time.t_end_factor)
    reports = {}
    info = {"beta1": beta1, "t_end": t_end}
    if pair_series:
        beta = pair_beta(cfg, series[0])
        info["beta"] = beta
        for (i, j), ts in pair_series.items():
            pr = metrics.PairedRun(ts, rho0[i], rho0[j],
                                   (vel0[j][0] - vel0[i][0], vel0[j][1] - vel0[i][1]),
                                   g, cfg.fluid.mu, cfg.time.cadence, cfg.analysis.p_values)
            rep = metrics.stability_functionals(pr, beta)
            reports[(i, j)] = rep
            checks += pair_checks(rep, f"pair_{i}_{j}")
    if cfg.scenario == "intermediate_triple":
        checks += triple_checks(reports, rho0, g)
    return checks, reports, info


def triple_checks(reports, rho0, g):
    r1, r2, direct = reports[(0, 2)], reports[(1, 2)], reports[(0, 1)]
    bound = float(np.sqrt(np.sqrt(np.sum((rho0[0] - rho0[1]) ** 2) * g.cell_area)))
    out = [
        _check("triple.x_norm_first", "|drho0^I|_X < inf", 0.0 if math.isfinite(r1["x_norm"]) else 1.0, 0.0),
        _check("triple.x_norm_second", "|drho0^II|_X < inf", 0.0 if math.isfinite(r2["x_norm"]) else 1.0, 0.0),
        _check("triple.dvr", "|drho0^I|_X <= |rho01 - rho02|_2^(1/2)", r1["x_norm"], bound),
    ]
    for key in ("lhs_lagrangian", "lhs_eulerian"):
        out.append(_check(
            f"triple.triangle_{key.split('_')[1]}",
            f"{key}(1,2) <= 1.05 * ({key}(1,I) + {key}(2,I))",
            direct[key], (1 + TRIANGLE_SLACK) * (r1[key] + r2[key])))
    return out


def _grid_of(cfg):
    return make_grid(cfg.grid.nx, cfg.grid.ny, cfg.grid.lx, cfg.grid.ly)


def run_scenario(cfg, out=None, density_scale=1.0, velocity_scale=1.0):
    """Run a single, pair or intermediate-triple scenario and write its artifacts."""
    out = _out_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    g = _grid_of(cfg)
    consts, beta1 = domain_rate(g, cfg.fluid.mu, cfg.fluid.rho_star)
    t_end = resolve_t_end(cfg, beta1)
    sp_ = scheme_params(cfg)
    data = member_data(cfg, g, density_scale, velocity_scale)
    states = [make_state(r, v, cfg.fluid.mu, g, cfg.fluid.rho_star) for r, v in data]
    res = run_members(states, sp_, t_end, _pairs_for(cfg), cfg.time.cadence,
                      cfg.analysis.p_values, cfg.time.sample_every if not _pairs_for(cfg) else 1,
                      cfg.time.snapshot_times, out)
    checks, reports, info = evaluate(cfg, res.series, res.energies, res.pair_series,
                                     res.rho0, res.vel0, g, beta1, t_end)
    info["poincare_constant"] = consts.poincare_constant
    info["steps"] = res.steps
    if cfg.analysis.eps_check and cfg.scenario == "single":
        checks.append(_eps_check(cfg, states[0], sp_, t_end, res.series[0]))
    _write_outputs(out, cfg, checks, reports, info, res.series, data)
    return Outcome(checks, reports, res, info)


def _eps_check(cfg, state0, sp_, t_end, series):
    finer = replace(sp_, eps_vac=sp_.eps_vac / 10)
    alt = run_members([state0], finer, t_end)
    t = series["t"]
    w = fit_window(t[-1])
    r0 = metrics.fit_decay_rate(t, series["kinetic_energy"], w).rate
    r1 = metrics.fit_decay_rate(alt.series[0]["t"], alt.series[0]["kinetic_energy"], w).rate
    return _check("eps_vac_sensitivity", "|rate(eps) - rate(eps/10)| / rate(eps) < 0.02",
                  abs(r0 - r1) / r0, 0.02, abs(r0 - r1) / r0 < 0.02)


def _write_outputs(out, cfg, checks, reports, info, series, data):
    write_checks(out / "checks.csv", checks)
    for (i, j), rep in reports.items():
        rep.to_csv(out / f"report_{i}_{j}.csv")
    g = _grid_of(cfg)
    lines = [f"scenario: {cfg.scenario}", f"grid: {g.nx}x{g.ny} on [0,{g.lx}]x[0,{g.ly}]",
             f"mu = {cfg.fluid.mu:g}, rho_star = {cfg.fluid.rho_star:g}"]
    lines += [f"{k} = {v:.10g}" for k, v in info.items()]
    for k, ts in enumerate(series):
        rates = fitted_rates(ts)
        if rates:
            lines.append(f"member{k} fitted rates: " + ", ".join(f"{c}={r:.4g}" for c, r in rates.items()))
        rho0, vel0 = data[k]
        lines.append(f"member{k} smallness indicator = "
                     f"{metrics.smallness_indicator(rho0, vel0, cfg.fluid.mu, g):.6g}")
        if np.any(rho0 == 0):
            lines.append(f"member{k} has vacuum cells: perturbations supported there have infinite X-norm")
    for (i, j), rep in reports.items():
        lines.append(f"\n[stability report, member{j} - member{i}]")
        lines.append(rep.to_text().rstrip())
        if rep["x_norm_infinite"]:
            lines.append("note: the density perturbation leaves the support of the reference density "
                         "(X-norm infinite); compare through the intermediate_triple scenario")
    lines.append("\n[checks]")
    lines.append(format_checks(checks))
    verdict = "PASS" if all(c.passed for c in checks) else "FAIL"
    lines.append(f"\noverall: {verdict}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")


def run_single(cfg, out=None):
    if cfg.scenario != "single":
        raise ConfigError([f"run_single needs scenario 'single', got {cfg.scenario!r}"])
    return run_scenario(cfg, out)


def run_pair(cfg, out=None):
    if cfg.scenario != "pair":
        raise ConfigError([f"run_pair needs scenario 'pair', got {cfg.scenario!r}"])
    return run_scenario(cfg, out)


def run_intermediate_triple(cfg, out=None):
    if cfg.scenario != "intermediate_triple":
        raise ConfigError([f"run_intermediate_triple needs scenario 'intermediate_triple', got {cfg.scenario!r}"])
    return run_scenario(cfg, out)


# --- sweeps ---------------------------------------------------------------------


class SweepResult(NamedTuple):
    amplitudes: tuple
    reports: list
    slopes: dict
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


def loglog_slope(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 4:
        raise ValueError("a slope needs at least 4 points")
    if np.any(x <= 0) or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _sweep_member(args):
    cfg, k, amp, out = args
    kind = cfg.sweep.kind
    sub = replace(cfg, scenario="pair")
    outcome = run_scenario(sub, Path(out) / f"amp{k}",
                           density_scale=amp if kind == "density" else 1.0,
                           velocity_scale=amp if kind == "velocity" else 1.0)
    return outcome.reports[(0, 1)], outcome.checks


def sweep_checks(kind, amplitudes, reports):
    slopes = {}
    checks = []
    if kind == "density":
        x = [r["drho0_l2"] for r in reports]
        for key in ("sup_drho_neg", "int_grad_dv", "int_grad_du", "lhs_lagrangian"):
            slopes[key] = loglog_slope(x, [r[key] for r in reports])
        slopes["int_grad_dv_vs_data"] = loglog_slope([r["data_functional"] for r in reports],
                                                     [r["int_grad_dv"] for r in reports])
        for key in ("sup_drho_neg", "int_grad_dv"):
            checks.append(_check(f"sweep.slope_{key}", f"0.45 <= slope of {key} vs |drho0|_2",
                                 DENSITY_SLOPE_MIN, slopes[key],
                                 slopes[key] >= DENSITY_SLOPE_MIN))
    else:
        for key in ("lhs_lagrangian", "int_grad_du", "int_grad_dv", "sup_drho_neg"):
            slopes[key] = loglog_slope(amplitudes, [r[key] for r in reports])
        for key in ("lhs_lagrangian", "int_grad_dv"):
            checks.append(_check(f"sweep.slope_{key}", f"|slope of {key} vs lambda - 1| <= 0.1",
                                 abs(slopes[key] - 1.0), VELOCITY_SLOPE_TOL))
        ratios = np.array([r["ratio_lagrangian"] for r in reports])
        spread = float(np.max(np.abs(ratios / np.median(ratios) - 1.0)))
        checks.append(_check("sweep.ratio_stability", "max |ratio / median(ratio) - 1| <= 0.3",
                             spread, RATIO_SPREAD))
    return slopes, checks


def run_sweep(cfg, out=None, threads=None):
    """One pair run per amplitude; members are independent and may run in parallel."""
    if cfg.scenario != "sweep":
        raise ConfigError([f"run_sweep needs scenario 'sweep', got {cfg.scenario!r}"])
    amps = tuple(cfg.sweep.amplitudes)
    if len(amps) < 4 or any(a <= 0 for a in amps):
        raise ConfigError(["sweep.amplitudes: need at least 4 positive amplitudes"])
    out = _out_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    jobs = [(cfg, k, a, str(out)) for k, a in enumerate(amps)]
    threads = cfg.threads if threads is None else threads
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_member, jobs))
    else:
        results = [_sweep_member(j) for j in jobs]
    reports = [r for r, _ in results]
    member_checks = [c._replace(name=f"amp{k}.{c.name}") for k, (_, cs) in enumerate(results) for c in cs]
    slopes, checks = sweep_checks(cfg.sweep.kind, amps, reports)
    checks = member_checks + checks
    _write_sweep(out, amps, reports, slopes, checks)
    return SweepResult(amps, reports, slopes, checks)


def _write_sweep(out, amps, reports, slopes, checks):
    keys = list(reports[0])
    with open(out / "sweep.csv", "w") as fh:
        fh.write(",".join(["amplitude", *keys]) + "\n")
        for a, r in zip(amps, reports):
            fh.write(",".join("%.17g" % v for v in [a, *(float(r[k]) for k in keys)]) + "\n")
        for key, s in slopes.items():
            fh.write(f"# slope {key} = {s:.17g}\n")
    write_checks(out / "checks.csv", checks)
    text = ["scenario: sweep"]
    text += [f"slope {k} = {v:.6g}" for k, v in slopes.items()]
    text += ["", "[checks]", format_checks(checks), "",
             f"overall: {'PASS' if all(c.passed for c in checks) else 'FAIL'}"]
    (out / "report.txt").write_text("\n".join(text) + "\n")


# --- re-verification ------------------------------------------------------------


def verify(directory):
    """
    Recompute every check and report from the stored CSVs of a finished
    scenario and compare with the stored verdicts.

    Returns ``(checks, consistent)``: the recomputed checks, and whether they
    agree with ``checks.csv`` (same verdicts, values equal to 1e-9 relative).
    """
    d = Path(directory)
    cfg = load_config(d / "config.yaml")
    if cfg.scenario == "sweep":
        reports = []
        checks = []
        consistent = True
        for k in range(len(cfg.sweep.amplitudes)):
            cs, ok = verify(d / f"amp{k}")
            checks += [c._replace(name=f"amp{k}.{c.name}") for c in cs]
            consistent &= ok
            reports.append(metrics.StabilityReport.from_csv(d / f"amp{k}" / "report_0_1.csv"))
        _, sc = sweep_checks(cfg.sweep.kind, cfg.sweep.amplitudes, reports)
        checks += sc
        return checks, consistent and _agree(checks, read_checks(d / "checks.csv"))
    g = _grid_of(cfg)
    _, beta1 = domain_rate(g, cfg.fluid.mu, cfg.fluid.rho_star)
    t_end = resolve_t_end(cfg, beta1)
    n = {"single": 1, "pair": 2, "intermediate_triple": 3}[cfg.scenario]
    series = [TimeSeries.from_csv(d / f"member{k}.csv") for k in range(n)]
    energies = [_read_energy(d / f"energy_member{k}.csv") for k in range(n)]
    pair_series = {pq: TimeSeries.from_csv(d / f"pair_{pq[0]}_{pq[1]}.csv") for pq in _pairs_for(cfg)}
    scale = _stored_scales(cfg, d)
    data = member_data(cfg, g, *scale)
    checks, reports, _ = evaluate(cfg, series, energies, pair_series,
                                  [r for r, _ in data], [v for _, v in data], g, beta1, t_end)
    stored = read_checks(d / "checks.csv")
    if cfg.analysis.eps_check and cfg.scenario == "single":
        checks += [c for c in stored if c.name == "eps_vac_sensitivity"]
    consistent = _agree(checks, stored)
    for pq, rep in reports.items():
        old = metrics.StabilityReport.from_csv(d / f"report_{pq[0]}_{pq[1]}.csv")
        consistent &= all(_close(rep[k], old[k]) for k in old)
    return checks, consistent


def _stored_scales(cfg, d):
    """Sweep members store the full sweep config; their amplitude is recovered from the directory name."""
    parent = d.parent / "config.yaml"
    if d.name.startswith("amp") and parent.exists():
        pcfg = load_config(parent)
        if pcfg.scenario == "sweep":
            a = pcfg.sweep.amplitudes[int(d.name[3:])]
            return (a, 1.0) if pcfg.sweep.kind == "density" else (1.0, a)
    return (1.0, 1.0)


def _close(a, b):
    a, b = float(a), float(b)
    if math.isnan(a) and math.isnan(b):
        return True
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))


def _agree(new, old):
    if [c.name for c in new] != [c.name for c in old]:
        return False
    return all(a.passed == b.passed and _close(a.lhs, b.lhs) and _close(a.rhs, b.rhs)
               for a, b in zip(new, old))
