"""
Norms, functionals and decay-rate fits.

Quadrature is midpoint throughout: a cell value stands for the cell average.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import trapezoid

from .grid import Grid, gradient, laplacian_dirichlet, neumann_cell_matrix


def face_to_center(vel):
    u, v = vel
    return 0.5 * (u[1:, :] + u[:-1, :]), 0.5 * (v[:, 1:] + v[:, :-1])


def kinetic_energy(rho, vel, g):
    """``int rho |v|^2`` with the velocity averaged to cell centers."""
    uc, vc = face_to_center(vel)
    return float(np.sum(rho * (uc**2 + vc**2)) * g.cell_area)


def h1_seminorm(vel, g):
    """
    Discrete ``||grad v||_2`` built from the same differences as
    ``laplacian_dirichlet``, so ``<-Lap v, v> = h1_seminorm(v)**2`` exactly.
    Wall-normal differences against the reflected ghost carry half weight.
    """
    u, v = vel
    w = g.cell_area
    total = np.sum(np.diff(u, axis=0) ** 2) / g.hx**2
    total += np.sum(np.diff(u, axis=1) ** 2) / g.hy**2
    total += 0.5 * (np.sum((2 * u[:, 0]) ** 2) + np.sum((2 * u[:, -1]) ** 2)) / g.hy**2
    total += np.sum(np.diff(v, axis=1) ** 2) / g.hy**2
    total += np.sum(np.diff(v, axis=0) ** 2) / g.hx**2
    total += 0.5 * (np.sum((2 * v[0, :]) ** 2) + np.sum((2 * v[-1, :]) ** 2)) / g.hx**2
    return float(np.sqrt(total * w))


def hessian_norm(vel, g):
    """
    ``||Lap v||_2``. For fields vanishing on the walls of a rectangle this
    equals ``||grad^2 v||_2`` (the mixed boundary terms cancel on flat sides).
    """
    lu, lv = laplacian_dirichlet(vel, g)
    return float(np.sqrt((np.sum(lu[1:-1, :] ** 2) + np.sum(lv[:, 1:-1] ** 2)) * g.cell_area))


def gradient_l2(p, g):
    gx, gy = gradient(p, g)
    return float(np.sqrt((np.sum(gx**2) + np.sum(gy**2)) * g.cell_area))


def velocity_gradient_centers(vel, g):
    """
    Cell-centered velocity gradient ``G[..., a, b] = d v_a / d x_b``.

    Diagonal entries are the face differences (so ``trace G`` is exactly the
    discrete divergence); off-diagonal entries are corner differences, using
    the reflected wall ghost, averaged to the centers.
    """
    u, v = vel
    G = np.empty(g.shape + (2, 2))
    G[..., 0, 0] = (u[1:, :] - u[:-1, :]) / g.hx
    G[..., 1, 1] = (v[:, 1:] - v[:, :-1]) / g.hy
    ue = np.concatenate([-u[:, :1], u, -u[:, -1:]], axis=1)
    du_dy = (ue[:, 1:] - ue[:, :-1]) / g.hy  # corners, (nx+1, ny+1)
    ve = np.concatenate([-v[:1, :], v, -v[-1:, :]], axis=0)
    dv_dx = (ve[1:, :] - ve[:-1, :]) / g.hx
    G[..., 0, 1] = 0.25 * (du_dy[:-1, :-1] + du_dy[1:, :-1] + du_dy[:-1, 1:] + du_dy[1:, 1:])
    G[..., 1, 0] = 0.25 * (dv_dx[:-1, :-1] + dv_dx[1:, :-1] + dv_dx[:-1, 1:] + dv_dx[1:, 1:])
    return G


def gradient_sup(vel, g):
    """``max |grad v|`` (Frobenius) over cell centers."""
    G = velocity_gradient_centers(vel, g)
    return float(np.max(np.sqrt(np.sum(G**2, axis=(-2, -1)))))


# --- negative Sobolev norm ----------------------------------------------------


class NegSobolevNorm(NamedTuple):
    value: float
    lower_bound: bool

    def __float__(self):
        return float(self.value)


@lru_cache(maxsize=8)
def _riesz_factor(g):
    m = sp.identity(g.nx * g.ny, format="csc") - neumann_cell_matrix(g).tocsc()
    return spla.splu(m)


def _w1_dual_two(drho, g):
    psi = _riesz_factor(g).solve(np.ascontiguousarray(drho, dtype=float).ravel())
    val = float(np.dot(drho.ravel(), psi) * g.cell_area)
    return float(np.sqrt(max(val, 0.0)))


def _dictionary(g):
    """Test functions for the dual lower bound: constant, cosines, bumps."""
    x, y = g.centers()
    out = [np.ones(g.shape)]
    for k in range(5):
        for m in range(5):
            if k == 0 and m == 0:
                continue
            out.append(np.cos(k * np.pi * x / g.lx) * np.cos(m * np.pi * y / g.ly))
    width = 0.1 * min(g.lx, g.ly)
    for cx in (np.arange(4) + 0.5) / 4 * g.lx:
        for cy in (np.arange(4) + 0.5) / 4 * g.ly:
            out.append(np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / width**2))
    return out


def w1_norm(phi, q, g):
    """
    Discrete ``W^1_q`` norm ``(||phi||_q^q + ||grad phi||_q^q)^(1/q)`` with the
    gradient taken componentwise on interior faces. For ``q = 2`` this is
    exactly the norm behind the Riesz solve used at ``p = 2``.
    """
    gx, gy = gradient(phi, g)
    s = np.sum(np.abs(phi) ** q) + np.sum(np.abs(gx) ** q) + np.sum(np.abs(gy) ** q)
    return float((s * g.cell_area) ** (1.0 / q))


@lru_cache(maxsize=16)
def _normalised_dictionary(g, p):
    q = p / (p - 1.0)
    return np.stack([phi / w1_norm(phi, q, g) for phi in _dictionary(g)])


def neg_sobolev_norm(drho, p, g):
    """
    ``||drho||_{W^{-1}_p}`` as the dual of ``W^1_{p'}`` (no boundary condition
    on the test functions).

    ``p = 2`` is exact: ``sqrt(<drho, (I - Lap_N)^{-1} drho>)``. Any other
    ``p`` returns the best value over a fixed dictionary of normalised test
    functions (the constant, ``cos(k pi x) cos(m pi y)`` for ``k, m <= 4``,
    and 16 Gaussian bumps), flagged ``lower_bound=True``.
    """
    if not p > 1 or not np.isfinite(p):
        raise ValueError("p must lie in (1, inf)")
    drho = np.asarray(drho, dtype=float)
    if drho.shape != g.shape:
        raise ValueError("field does not match the grid")
    if p == 2:
        return NegSobolevNorm(_w1_dual_two(drho, g), False)
    pairs = np.tensordot(_normalised_dictionary(g, float(p)), drho, axes=2) * g.cell_area
    return NegSobolevNorm(float(np.max(np.abs(pairs))), True)


def holder_factor(p, g):
    """
    Constant ``c`` with ``||f||_{W^{-1}_p} <= c ||f||_{W^{-1}_2}`` for
    ``1 < p <= 2`` under the discrete norms above: Holder over a weighted
    family of total measure ``|cells| + |x-faces| + |y-faces|``.
    """
    if not 1 < p <= 2:
        raise ValueError("the comparison only holds for 1 < p <= 2")
    q = p / (p - 1.0)
    area = g.cell_area
    measure = area * (g.nx * g.ny + (g.nx - 1) * g.ny + g.nx * (g.ny - 1))
    return measure ** (0.5 - 1.0 / q)


# --- X-norm and intermediate data ---------------------------------------------


def x_norm(drho0, rho0_ref, g):
    """
    ``|| drho0 / sqrt(rho0_ref) ||_4``; ``inf`` when ``drho0`` charges a cell
    where the reference density vanishes.
    """
    drho0 = np.asarray(drho0, dtype=float)
    pos = rho0_ref > 0
    if np.any(drho0[~pos] != 0):
        return float("inf")
    q = np.zeros_like(drho0)
    q[pos] = drho0[pos] / np.sqrt(rho0_ref[pos])
    return float((np.sum(q**4) * g.cell_area) ** 0.25)


class IntermediateData(NamedTuple):
    rho0: np.ndarray
    vel0: tuple
    x_norm: float
    bound: float


def intermediate_data(rho01, rho02, vel02, g):
    """
    Data ``((rho01 + rho02) / 2, v02)`` of the intermediate solution, with the
    measured ``|| (rho02 - rho01) / 2 / sqrt(rho01 + rho02) ||_4`` and the
    bound ``||rho01 - rho02||_2 ** 0.5`` it must respect.
    """
    if rho01.shape != g.shape or rho02.shape != g.shape:
        raise ValueError("densities do not match the grid")
    mid = 0.5 * (rho01 + rho02)
    total = rho01 + rho02
    half_diff = 0.5 * (rho02 - rho01)
    xn = x_norm(half_diff, total, g)
    bound = float(np.sqrt(np.sqrt(np.sum((rho01 - rho02) ** 2) * g.cell_area)))
    if not xn <= bound * (1 + 1e-12):
        raise AssertionError(f"intermediate X-norm {xn} exceeds its bound {bound}")
    return IntermediateData(mid, (vel02[0].copy(), vel02[1].copy()), xn, bound)


# --- time series functionals --------------------------------------------------


class DecayFit(NamedTuple):
    rate: float
    amplitude: float
    residual: float


def fit_decay_rate(t, values, window=None):
    """
    Least-squares fit of ``log(values) = log(amplitude) - rate * t`` over the
    samples with ``t`` inside ``window``.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = np.isfinite(values)
    if window is not None:
        keep &= (t >= window[0]) & (t <= window[1])
    t, values = t[keep], values[keep]
    if len(t) < 10:
        raise ValueError(f"need at least 10 samples to fit, got {len(t)}")
    if np.any(values <= 0):
        raise ValueError("channel must be positive on the fit window")
    logs = np.log(values)
    slope, intercept = np.polyfit(t, logs, 1)
    resid = logs - (slope * t + intercept)
    return DecayFit(float(-slope), float(np.exp(intercept)), float(np.sqrt(np.mean(resid**2))))


def weighted_integral(t, values, beta, power=1.0, t_weight=False):
    """Trapezoid ``int exp(2 beta t) (t) values dt`` over samples, skipping NaNs."""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = np.isfinite(values)
    t, values = t[keep], values[keep]
    f = np.exp(2 * beta * t) * values**power
    if t_weight:
        f = f * t
    return float(trapezoid(f, t)) if len(t) > 1 else 0.0


def smallness_indicator(rho0, vel0, mu, g):
    """``rho_star^(3/2) ||sqrt(rho0) v0||_2 ||grad v0||_2 / mu^2`` with ``rho_star = max rho0``."""
    if not mu > 0:
        raise ValueError("viscosity must be positive")
    rho_star = float(np.max(rho0))
    return rho_star**1.5 * np.sqrt(kinetic_energy(rho0, vel0, g)) * h1_seminorm(vel0, g) / mu**2


# --- paired runs --------------------------------------------------------------


def neg_key(p):
    return f"drho_neg_p{p:g}"


def pair_channels(p_values=()):
    return (
        "t", "step", "du_weighted", "grad_du", "grad_dv", "drho_neg2",
        *(neg_key(p) for p in p_values),
        "a1", "a2", "i_phi", "z_weighted", "grad_wbar", "div_solver_res", "z_residual", "dq",
    )


@dataclass
class PairedRun:
    """
    Sampled difference channels of two synchronized runs (second minus
    first) together with their initial data.
    """

    series: object
    rho01: np.ndarray
    rho02: np.ndarray
    dvel0: tuple
    grid: Grid
    mu: float
    cadence: int
    p_values: tuple = ()


REPORT_KEYS = (
    "beta", "t_end", "cadence", "n_samples",
    "sup_weighted_du", "int_grad_du", "int_grad_dv", "sup_drho_neg",
    "drho0_l2", "dv0_weighted", "data_functional",
    "lhs_lagrangian", "lhs_eulerian", "ratio_lagrangian", "ratio_eulerian",
    "x_norm", "x_norm_infinite",
    "a1_max", "a2_max", "a_split_err",
    "sup_weighted_du_half", "int_grad_du_half", "int_grad_dv_half",
    "tail_fraction", "z_residual_max", "div_solver_res_max", "dq_max",
)


class StabilityReport(dict):
    """Named stability functionals; keys in ``REPORT_KEYS`` plus one ``sup_drho_neg_p*`` per extra p."""

    def to_csv(self, path):
        keys = list(self)
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            fh.write(",".join("%.17g" % float(self[k]) for k in keys) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            keys = fh.readline().strip().split(",")
            vals = [float(x) for x in fh.readline().strip().split(",")]
        return cls(zip(keys, vals))

    def to_text(self):
        return "\n".join(f"{k} = {float(v):.10g}" for k, v in self.items()) + "\n"


def _sup(t, values, beta):
    keep = np.isfinite(values)
    if not np.any(keep):
        return 0.0
    return float(np.max(np.exp(beta * t[keep]) * values[keep]))


def _safe_ratio(num, den):
    if den > 0:
        return num / den
    return 0.0 if num == 0 else float("inf")


def stability_functionals(pair, beta):
    """
    Weighted stability functionals of a paired run.

    Left-hand sides: ``sup_t e^{beta t} |min(sqrt rho01, sqrt rho02) du|_2 +
    (int e^{2 beta t} |grad du|_2^2)^(1/2)`` (Lagrangian) and
    ``sup_t |drho|_{W^-1_2} + (int e^{2 beta t} |grad dv|_2^2)^(1/2)``
    (Eulerian). Data functional: ``|sqrt(rho01) dv0|_2 + |drho0|_2^(1/2)``.
    Every weighted entry is also reported at ``beta / 2``.
    """
    if not beta >= 0:
        raise ValueError("beta must be nonnegative")
    s = pair.series
    g = pair.grid
    t = s["t"]
    drho0 = pair.rho02 - pair.rho01
    drho0_l2 = float(np.sqrt(np.sum(drho0**2) * g.cell_area))
    dv0 = float(np.sqrt(kinetic_energy(pair.rho01, pair.dvel0, g)))
    data = dv0 + np.sqrt(drho0_l2)
    xn = x_norm(drho0, pair.rho02, g)

    def weighted(b):
        sup_du = _sup(t, s["du_weighted"], b)
        w = np.exp(2 * b * t)
        int_du = float(np.sqrt(trapezoid(w * s["grad_du"] ** 2, t))) if len(t) > 1 else 0.0
        int_dv = float(np.sqrt(trapezoid(w * s["grad_dv"] ** 2, t))) if len(t) > 1 else 0.0
        return sup_du, int_du, int_dv

    sup_du, int_du, int_dv = weighted(beta)
    sup_du_h, int_du_h, int_dv_h = weighted(beta / 2)
    sup_neg = _sup(t, s["drho_neg2"], 0.0)
    a1, a2, iphi = s["a1"], s["a2"], s["i_phi"]
    ok = np.isfinite(a1)
    full = trapezoid(np.exp(2 * beta * t) * s["grad_du"] ** 2, t) if len(t) > 1 else 0.0
    half = t >= 0.5 * t[-1]
    tail = (trapezoid((np.exp(2 * beta * t) * s["grad_du"] ** 2)[half], t[half])
            if np.count_nonzero(half) > 1 else 0.0)

    def fmax(x):
        x = np.abs(x[np.isfinite(x)])
        return float(np.max(x)) if x.size else 0.0

    lhs_l = sup_du + int_du
    lhs_e = sup_neg + int_dv
    rep = StabilityReport(
        beta=float(beta), t_end=float(t[-1]), cadence=float(pair.cadence),
        n_samples=float(np.count_nonzero(np.isfinite(s["drho_neg2"]))),
        sup_weighted_du=sup_du, int_grad_du=int_du, int_grad_dv=int_dv, sup_drho_neg=sup_neg,
        drho0_l2=drho0_l2, dv0_weighted=dv0, data_functional=float(data),
        lhs_lagrangian=lhs_l, lhs_eulerian=lhs_e,
        ratio_lagrangian=_safe_ratio(lhs_l, data), ratio_eulerian=_safe_ratio(lhs_e, data),
        x_norm=xn, x_norm_infinite=float(np.isinf(xn)),
        a1_max=fmax(a1), a2_max=fmax(a2), a_split_err=fmax((a1 + a2 - iphi)[ok]),
        sup_weighted_du_half=sup_du_h, int_grad_du_half=int_du_h, int_grad_dv_half=int_dv_h,
        tail_fraction=_safe_ratio(float(tail), float(full)),
        z_residual_max=fmax(s["z_residual"]), div_solver_res_max=fmax(s["div_solver_res"]),
        dq_max=fmax(s["dq"]),
    )
    for p in pair.p_values:
        rep[f"sup_{neg_key(p)}"] = _sup(t, s[neg_key(p)], 0.0)
    return rep
