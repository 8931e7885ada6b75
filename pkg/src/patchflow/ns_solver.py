"""
Variable-density incompressible Navier-Stokes on the MAC grid.

One step is a first-order splitting:

1. the density is transported with the current velocity (bound-preserving
   MUSCL, possibly in substeps), which also yields the time-averaged mass
   fluxes actually used;
2. a momentum predictor in conservative form,
   ``(r_new v* - r_old v) / dt + div(F v*) - mu Lap v* = -grad p_old``,
   where ``r`` is the regularised density on velocity faces and ``F`` the
   face-averaged regularised mass flux; convection is upwind and implicit;
3. a variable-coefficient projection ``div((dt / r_new) grad phi) = div v*``.

The regularised density ``r = rho + eps * (rho_star - rho)`` is an affine
function of ``rho`` and is therefore transported by the same fluxes. Because
the face masses satisfy the discrete mass balance exactly, testing the
predictor with ``v*`` gives
``E(v_new) <= E(v*) <= E(v) - dt * mu * |grad v*|^2`` for
``E = 1/2 sum r |v|^2``: the scheme energy can only decrease.
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import metrics
from .errors import SolverError
from .grid import (
    divergence,
    divergence_matrix,
    gradient,
    pack_interior,
    unpack_interior,
    velocity_from_stream_function,
    velocity_laplacian_matrices,
)
from .transport import advect_with_fluxes


@dataclass(frozen=True)
class SchemeParams:
    eps_vac: float = 1e-3
    cfl: float = 0.9
    momentum_tol: float = 1e-10
    projection_tol: float = 1e-10
    max_substeps: int = 64
    incremental_pressure: bool = False
    div_tol: float = 1e-8

    def __post_init__(self):
        problems = []
        if not 0 < self.eps_vac <= 0.1:
            problems.append("eps_vac must lie in (0, 0.1]")
        if not 0 < self.cfl <= 0.9:
            problems.append("cfl must lie in (0, 0.9]")
        for name in ("momentum_tol", "projection_tol"):
            if not 0 < getattr(self, name) <= 1e-4:
                problems.append(f"{name} must lie in (0, 1e-4]")
        if int(self.max_substeps) != self.max_substeps or self.max_substeps < 1:
            problems.append("max_substeps must be a positive integer")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class SolutionState:
    t: float
    rho: np.ndarray
    vel: tuple
    p: np.ndarray
    mu: float
    rho_star: float
    grid: object = field(repr=False)

    def copy(self):
        return replace(
            self, rho=self.rho.copy(), vel=(self.vel[0].copy(), self.vel[1].copy()),
            p=self.p.copy(),
        )


def make_state(rho, vel, mu, g, rho_star=1.0, t=0.0, p=None):
    if not mu > 0:
        raise ValueError("viscosity must be positive")
    if rho.shape != g.shape:
        raise ValueError("density does not match the grid")
    if np.min(rho) < 0 or np.max(rho) > rho_star:
        raise ValueError(f"density outside [0, {rho_star}]")
    if not np.any(rho):
        raise ValueError("density is identically zero")
    p = g.zero_scalar() if p is None else p
    return SolutionState(float(t), rho.astype(float), (vel[0].astype(float), vel[1].astype(float)),
                         p.astype(float), float(mu), float(rho_star), g)


# --- initial velocities -------------------------------------------------------


def sin2_stream_function(k=1, m=1, lx=1.0, ly=1.0, amplitude=1.0):
    """``amplitude * sin^2(k pi x / lx) * sin^2(m pi y / ly)``: vanishes to second order on the walls."""
    def psi(x, y):
        return amplitude * np.sin(k * np.pi * x / lx) ** 2 * np.sin(m * np.pi * y / ly) ** 2
    return psi


_PROBE = 1e-7


def _check_wall_behaviour(psi, g):
    """Reject stream functions whose value or normal derivative is nonzero on the walls."""
    s = np.linspace(0.0, 1.0, 33)[1:-1]
    walls = [
        (s * g.lx, np.zeros_like(s), 0.0, 1.0),
        (s * g.lx, np.full_like(s, g.ly), 0.0, -1.0),
        (np.zeros_like(s), s * g.ly, 1.0, 0.0),
        (np.full_like(s, g.lx), s * g.ly, -1.0, 0.0),
    ]
    xn, yn = g.nodes()
    scale = max(float(np.max(np.abs(psi(xn, yn)))), 1e-300)
    for x, y, nx_, ny_ in walls:
        on = np.abs(psi(x, y))
        slope = np.abs(psi(x + _PROBE * nx_ * g.lx, y + _PROBE * ny_ * g.ly)) / _PROBE
        if np.max(on) > 1e-12 * scale or np.max(slope) > 1e-4 * scale:
            raise ValueError("stream function must vanish to second order on the walls")


def _stream_velocity(psi, g):
    if callable(psi):
        _check_wall_behaviour(psi, g)
        xn, yn = g.nodes()
        nodes = np.asarray(psi(xn, yn), dtype=float)
    else:
        nodes = np.asarray(psi, dtype=float)
        if nodes.shape != (g.nx + 1, g.ny + 1):
            raise ValueError(f"node stream function must have shape {(g.nx + 1, g.ny + 1)}")
    nodes = nodes.copy()
    scale = max(float(np.max(np.abs(nodes))), 1e-300)
    rim = np.concatenate([nodes[0, :], nodes[-1, :], nodes[:, 0], nodes[:, -1]])
    if np.max(np.abs(rim)) > 1e-12 * scale:
        raise ValueError("stream function is nonzero on the wall")
    # rounding-level wall values (e.g. sin(pi)^2) would leave tiny wall fluxes
    nodes[0, :] = nodes[-1, :] = 0.0
    nodes[:, 0] = nodes[:, -1] = 0.0
    return velocity_from_stream_function(nodes, g)


def stokes_eigenmode(g, amplitude=1.0, tol=1e-10, max_iter=200):
    """
    First discrete Stokes eigenmode (smallest ``lambda`` in
    ``-Lap v + grad q = lambda v, div v = 0``) by inverse iteration on the
    saddle-point system, scaled so ``max |v| = amplitude``.

    Returns ``(velocity, eigenvalue)``.
    """
    au, av = velocity_laplacian_matrices(g)
    a = sp.block_diag([au, av], format="csr")
    b = divergence_matrix(g)[1:, :]  # one redundant constraint removed
    kkt = sp.bmat([[-a, b.T], [b, None]], format="csc")
    lu = spla.splu(kkt)
    n = a.shape[0]
    # deterministic start: the velocity of the sin^2 stream function
    x = pack_interior(_stream_velocity(sin2_stream_function(lx=g.lx, ly=g.ly), g))
    x /= np.linalg.norm(x)
    lam_old = None
    for _ in range(max_iter):
        y = lu.solve(np.concatenate([x, np.zeros(b.shape[0])]))[:n]
        x = y / np.linalg.norm(y)
        lam = float(x @ (-a @ x))
        if lam_old is not None and abs(lam - lam_old) <= tol * lam:
            break
        lam_old = lam
    else:
        raise SolverError("Stokes inverse iteration did not converge", iterations=max_iter)
    # the iterate is divergence-free only to the factorisation accuracy; restore it exactly
    x = _project_interior(x, g)
    k = int(np.argmax(np.abs(x)))
    x *= amplitude / x[k]
    return unpack_interior(x, g), lam


def _project_interior(x, g):
    b = divergence_matrix(g)
    s = (b @ b.T).tocsc()[1:, 1:]
    phi = np.zeros(g.nx * g.ny)
    phi[1:] = spla.spsolve(s, (b @ x)[1:])
    return x - b.T @ phi


def make_initial_velocity(kind, g, amplitude=1.0, psi=None, k=1, m=1):
    """
    Divergence-free initial velocity with zero wall faces.

    ``kind`` is ``"stokes_eigenmode"`` or ``"stream_function"``. For the
    latter, ``psi`` is a callable or an ``(nx+1, ny+1)`` node array; when
    omitted, ``amplitude * sin^2(k pi x) sin^2(m pi y)`` (scaled to the
    domain) is used.
    """
    if kind == "stokes_eigenmode":
        return stokes_eigenmode(g, amplitude)[0]
    if kind == "stream_function":
        if psi is None:
            psi = sin2_stream_function(k, m, g.lx, g.ly, amplitude)
        return _stream_velocity(psi, g)
    raise ValueError(f"unknown initial velocity kind {kind!r}")


# --- predictor ----------------------------------------------------------------


def regularized_density(rho, rho_star, eps_vac):
    return rho + eps_vac * (rho_star - rho)


def _face_density(r, axis):
    if axis == 0:
        return 0.5 * (r[1:, :] + r[:-1, :])
    return 0.5 * (r[:, 1:] + r[:, :-1])


def _dual_fluxes(fx, fy, axis):
    """East/west/north/south fluxes through the control volumes of interior faces."""
    if axis == 0:
        e = 0.5 * (fx[1:-1, :] + fx[2:, :])
        w = 0.5 * (fx[:-2, :] + fx[1:-1, :])
        n = 0.5 * (fy[:-1, 1:] + fy[1:, 1:])
        s = 0.5 * (fy[:-1, :-1] + fy[1:, :-1])
    else:
        n = 0.5 * (fy[:, 1:-1] + fy[:, 2:])
        s = 0.5 * (fy[:, :-2] + fy[:, 1:-1])
        e = 0.5 * (fx[1:, :-1] + fx[1:, 1:])
        w = 0.5 * (fx[:-1, :-1] + fx[:-1, 1:])
    return e, w, n, s


def _momentum_matrix(mass_new, e, w, n, s, lap, mu, area, dt):
    """Implicit upwind convection + backward-Euler viscosity on one component."""
    ni, nj = mass_new.shape
    diag = (mass_new * (area / dt) + np.maximum(e, 0) - np.minimum(w, 0)
            + np.maximum(n, 0) - np.minimum(s, 0))
    east = np.minimum(e, 0)[:-1].ravel()
    west = -np.maximum(w, 0)[1:].ravel()
    north = np.minimum(n, 0)
    north[:, -1] = 0.0  # top neighbour is a wall value
    south = -np.maximum(s, 0)
    south[:, 0] = 0.0
    conv = sp.diags(
        [diag.ravel(), east, west, north.ravel()[:-1], south.ravel()[1:]],
        [0, nj, -nj, 1, -1], format="csr",
    )
    return (conv - (mu * area) * lap).tocsc()


def _solve(matrix, rhs, tol, what):
    x = spla.splu(matrix, permc_spec="MMD_AT_PLUS_A").solve(rhs)
    res = np.linalg.norm(matrix @ x - rhs)
    scale = np.linalg.norm(rhs)
    if not np.all(np.isfinite(x)) or res > tol * max(scale, 1e-300) and res > 1e-14:
        raise SolverError(f"{what} solve missed its tolerance", iterations=1,
                          residual=float(res / max(scale, 1e-300)))
    return x


class _Operators:
    """Grid-dependent sparse matrices, built once per grid."""

    _cache = {}

    def __init__(self, g):
        self.lap_u, self.lap_v = velocity_laplacian_matrices(g)
        self.div = divergence_matrix(g)

    @classmethod
    def of(cls, g):
        if g not in cls._cache:
            cls._cache[g] = cls(g)
        return cls._cache[g]


def _predict(g, r_old, r_new, fluxes, vel, p_old, dt, mu, sp_):
    ops = _Operators.of(g)
    area = g.cell_area
    fx, fy = fluxes
    u, v = vel
    gx, gy = gradient(p_old, g) if sp_.incremental_pressure else (None, None)
    out = []
    for axis, comp, lap in ((0, u, ops.lap_u), (1, v, ops.lap_v)):
        m_old = _face_density(r_old, axis)
        m_new = _face_density(r_new, axis)
        interior = comp[1:-1, :] if axis == 0 else comp[:, 1:-1]
        rhs = m_old * interior * (area / dt)
        if gx is not None:
            gp = gx[1:-1, :] if axis == 0 else gy[:, 1:-1]
            rhs = rhs - area * gp
        mat = _momentum_matrix(m_new, *_dual_fluxes(fx, fy, axis), lap, mu, area, dt)
        sol = _solve(mat, rhs.ravel(), sp_.momentum_tol, "momentum").reshape(interior.shape)
        full = np.zeros(g.u_shape if axis == 0 else g.v_shape)
        if axis == 0:
            full[1:-1, :] = sol
        else:
            full[:, 1:-1] = sol
        out.append(full)
    return tuple(out)


def _regularized_step_data(s, dt, sp_):
    """Transport ``rho`` and return ``(rho_new, r_old, r_new, regularised fluxes, nsub)``."""
    g = s.grid
    rho_new, (fx, fy), nsub = advect_with_fluxes(
        s.rho, s.vel, dt, g, s.rho_star, sp_.max_substeps, sp_.cfl, sp_.div_tol
    )
    eps = sp_.eps_vac
    r_old = regularized_density(s.rho, s.rho_star, eps)
    ux = np.zeros(g.u_shape)
    vy = np.zeros(g.v_shape)
    ux[1:-1, :] = s.vel[0][1:-1, :] * g.hy
    vy[:, 1:-1] = s.vel[1][:, 1:-1] * g.hx
    rfx = (1 - eps) * fx + eps * s.rho_star * ux
    rfy = (1 - eps) * fy + eps * s.rho_star * vy
    # the face masses used by the predictor must satisfy the discrete mass balance exactly
    r_new = r_old - (dt / g.cell_area) * ((rfx[1:, :] - rfx[:-1, :]) + (rfy[:, 1:] - rfy[:, :-1]))
    return rho_new, r_old, r_new, (rfx, rfy), nsub


def momentum_predictor(s, dt, sp_=SchemeParams()):
    """Intermediate velocity ``v*`` after transport, convection and viscosity."""
    _, r_old, r_new, fluxes, _ = _regularized_step_data(s, dt, sp_)
    return _predict(s.grid, r_old, r_new, fluxes, s.vel, s.p, dt, s.mu, sp_)


# --- projection ---------------------------------------------------------------


def pressure_projection(v_star, rho, dt, sp_=SchemeParams(), rho_star=1.0, g=None,
                        regularized=False):
    """
    Solve ``div((dt / r) grad phi) = div v*`` with no-flux walls and return
    ``(v, phi)`` with ``v = v* - (dt / r) grad phi`` and ``phi`` of zero mean.

    ``r`` is the regularised density built from ``rho`` unless
    ``regularized`` says ``rho`` already is one.
    """
    if g is None:
        raise ValueError("a grid is required")
    r = rho if regularized else regularized_density(rho, rho_star, sp_.eps_vac)
    ops = _Operators.of(g)
    beta = np.concatenate([
        (dt / _face_density(r, 0)).ravel(), (dt / _face_density(r, 1)).ravel()
    ])
    b = ops.div
    x = pack_interior(v_star)
    rhs = b @ x
    phi = np.zeros(g.nx * g.ny)
    if np.any(rhs):
        mat = (b @ sp.diags(beta) @ b.T).tocsc()[1:, 1:]
        phi[1:] = _solve(mat, rhs[1:], sp_.projection_tol, "projection")
        phi -= phi.mean()
    x_new = x - beta * (b.T @ phi)
    vel = unpack_interior(x_new, g)
    res = float(np.max(np.abs(divergence(vel, g))))
    if res > sp_.div_tol:
        raise SolverError("projected velocity is not divergence-free", residual=res)
    return vel, phi.reshape(g.shape)


# --- time stepping ------------------------------------------------------------


def stable_dt(s, sp_=SchemeParams()):
    g = s.grid
    h = min(g.hx, g.hy)
    vmax = max(float(np.max(np.abs(s.vel[0]))), float(np.max(np.abs(s.vel[1]))))
    return sp_.cfl * (h if vmax <= 1.0 else h / vmax)


def scheme_energy(s, sp_=SchemeParams()):
    """``1/2 sum r_face |v|^2 hx hy`` with the regularised density ``r``."""
    r = regularized_density(s.rho, s.rho_star, sp_.eps_vac)
    u, v = s.vel
    total = np.sum(_face_density(r, 0) * u[1:-1, :] ** 2) + np.sum(_face_density(r, 1) * v[:, 1:-1] ** 2)
    return 0.5 * float(total) * s.grid.cell_area


class StepInfo(NamedTuple):
    dt: float
    substeps: int
    energy_before: float
    energy_after: float
    dissipation: float


def advance(s, sp_=SchemeParams(), dt=None):
    """One step; returns ``(new_state, StepInfo)``."""
    g = s.grid
    dt = stable_dt(s, sp_) if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("time step must be positive")
    e0 = scheme_energy(s, sp_)
    if not np.any(s.vel[0]) and not np.any(s.vel[1]) and not (sp_.incremental_pressure and np.any(s.p)):
        new = s.copy()
        new.t = s.t + dt
        if not sp_.incremental_pressure:
            new.p = g.zero_scalar()
        return new, StepInfo(dt, 0, e0, e0, 0.0)
    rho_new, r_old, r_new, fluxes, nsub = _regularized_step_data(s, dt, sp_)
    v_star = _predict(g, r_old, r_new, fluxes, s.vel, s.p, dt, s.mu, sp_)
    vel, phi = pressure_projection(v_star, r_new, dt, sp_, g=g, regularized=True)
    p = s.p + phi if sp_.incremental_pressure else phi
    if sp_.incremental_pressure:
        p = p - p.mean()
    new = SolutionState(s.t + dt, rho_new, vel, p, s.mu, s.rho_star, g)
    diss = dt * s.mu * metrics.h1_seminorm(v_star, g) ** 2
    return new, StepInfo(dt, nsub, e0, scheme_energy(new, sp_), diss)


def step(s, sp_=SchemeParams(), dt=None):
    return advance(s, sp_, dt)[0]


# --- sampled runs -------------------------------------------------------------

CHANNELS = (
    "t", "step", "dt", "kinetic_energy", "scheme_energy", "grad_v", "sqrt_rho_vt", "lap_v",
    "grad_p", "grad_v_sup", "div_residual", "mass", "rho_min", "rho_max", "v_max",
)


def sample_channels(s, sp_, dt_last, vel_prev, step_index=0):
    g = s.grid
    if vel_prev is None or dt_last == 0:
        vt = float("nan")
    else:
        dvel = ((s.vel[0] - vel_prev[0]) / dt_last, (s.vel[1] - vel_prev[1]) / dt_last)
        vt = float(np.sqrt(metrics.kinetic_energy(s.rho, dvel, g)))
    return {
        "t": s.t,
        "step": step_index,
        "dt": dt_last,
        "kinetic_energy": metrics.kinetic_energy(s.rho, s.vel, g),
        "scheme_energy": scheme_energy(s, sp_),
        "grad_v": metrics.h1_seminorm(s.vel, g),
        "sqrt_rho_vt": vt,
        "lap_v": metrics.hessian_norm(s.vel, g),
        "grad_p": metrics.gradient_l2(s.p, g),
        "grad_v_sup": metrics.gradient_sup(s.vel, g),
        "div_residual": float(np.max(np.abs(divergence(s.vel, g)))),
        "mass": float(np.sum(s.rho) * g.cell_area),
        "rho_min": float(np.min(s.rho)),
        "rho_max": float(np.max(s.rho)),
        "v_max": max(float(np.max(np.abs(s.vel[0]))), float(np.max(np.abs(s.vel[1])))),
    }


@dataclass
class RunResult:
    series: object
    final: SolutionState
    snapshots: list
    step_energy: np.ndarray
    step_dissipation: np.ndarray
    steps: int
    max_substeps: int

    def max_energy_increase(self):
        """Largest relative per-step increase of the scheme energy (<= 0 means none)."""
        e = self.step_energy
        if len(e) < 2:
            return 0.0
        return float(np.max((e[1:] - e[:-1]) / np.maximum(e[:-1], 1e-300)))


def time_grid(state, sp_, t_end):
    """Next step length, truncating the last step so the run ends exactly at ``t_end``."""
    dt = stable_dt(state, sp_)
    remaining = t_end - state.t
    if remaining <= dt * (1 + 1e-9):
        return remaining
    return dt


def simulate(state, sp_, t_end, sample_every=1, snapshot_times=(), on_step=None,
             series_path=None):
    """
    Integrate to ``t_end``, sampling channels every ``sample_every`` steps
    (and always at the start and the end).

    ``snapshot_times`` are captured at the first step reaching them.
    ``on_step(state, info)`` is called after each step. If ``series_path`` is
    given, the samples gathered so far are written there even if a step fails.
    """
    from .series import TimeSeries

    if t_end < state.t:
        raise ValueError("final time precedes the initial time")
    series = TimeSeries(CHANNELS)
    series.append(sample_channels(state, sp_, 0.0, None))
    pending = sorted(float(t) for t in snapshot_times)
    snapshots = []
    while pending and pending[0] <= state.t:
        snapshots.append((pending.pop(0), state.copy()))
    energies = [scheme_energy(state, sp_)]
    dissipation = []
    nsteps = 0
    max_sub = 0
    s = state
    try:
        while s.t < t_end - 1e-12 * max(1.0, t_end):
            dt = time_grid(s, sp_, t_end)
            prev_vel = s.vel
            s, info = advance(s, sp_, dt)
            nsteps += 1
            max_sub = max(max_sub, info.substeps)
            energies.append(info.energy_after)
            dissipation.append(info.dissipation)
            if on_step is not None:
                on_step(s, info)
            done = s.t >= t_end - 1e-12 * max(1.0, t_end)
            if done:
                s.t = float(t_end)
            if nsteps % sample_every == 0 or done:
                series.append(sample_channels(s, sp_, info.dt, prev_vel, nsteps))
            while pending and pending[0] <= s.t + 1e-12:
                snapshots.append((pending.pop(0), s.copy()))
    finally:
        if series_path is not None:
            series.to_csv(series_path)
    return RunResult(series, s, snapshots, np.array(energies), np.array(dissipation),
                     nsteps, max_sub)


def run(cfg, series_path=None):
    """Integrate member 0 of the scenario described by ``cfg`` to its final time."""
    from .harness import domain_rate, initial_state, resolve_t_end

    state, sp_ = initial_state(cfg, member=0)
    _, beta1 = domain_rate(state.grid, state.mu, state.rho_star)
    return simulate(state, sp_, resolve_t_end(cfg, beta1), cfg.time.sample_every,
                    cfg.time.snapshot_times, series_path=series_path)
