"""
Rectangular MAC grid and the discrete operators used throughout the package.

Layout (all arrays indexed ``[i, j]`` with ``i`` along x):

* scalars live at cell centers, shape ``(nx, ny)``;
* the x-velocity ``u`` lives on vertical faces, shape ``(nx + 1, ny)``;
* the y-velocity ``v`` lives on horizontal faces, shape ``(nx, ny + 1)``.

A vector field is passed around as a plain ``(u, v)`` tuple. Faces with
``i in (0, nx)`` for ``u`` and ``j in (0, ny)`` for ``v`` lie on the wall.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError

MIN_CELLS = 8


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    @property
    def hx(self):
        return self.lx / self.nx

    @property
    def hy(self):
        return self.ly / self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def diameter(self):
        return float(np.hypot(self.lx, self.ly))

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def u_shape(self):
        return (self.nx + 1, self.ny)

    @property
    def v_shape(self):
        return (self.nx, self.ny + 1)

    @cached_property
    def xc(self):
        return (np.arange(self.nx) + 0.5) * self.hx

    @cached_property
    def yc(self):
        return (np.arange(self.ny) + 0.5) * self.hy

    @cached_property
    def xf(self):
        return np.arange(self.nx + 1) * self.hx

    @cached_property
    def yf(self):
        return np.arange(self.ny + 1) * self.hy

    def centers(self):
        """Cell-center coordinates as two ``(nx, ny)`` arrays."""
        return np.meshgrid(self.xc, self.yc, indexing="ij")

    def u_points(self):
        return np.meshgrid(self.xf, self.yc, indexing="ij")

    def v_points(self):
        return np.meshgrid(self.xc, self.yf, indexing="ij")

    def nodes(self):
        return np.meshgrid(self.xf, self.yf, indexing="ij")

    def zero_scalar(self):
        return np.zeros(self.shape)

    def zero_vector(self):
        return np.zeros(self.u_shape), np.zeros(self.v_shape)


def make_grid(nx, ny, lx=1.0, ly=1.0):
    if int(nx) != nx or int(ny) != ny:
        raise ValueError("cell counts must be integers")
    if nx < MIN_CELLS or ny < MIN_CELLS:
        raise ValueError(f"need at least {MIN_CELLS} cells per direction, got {nx}x{ny}")
    if not (lx > 0 and ly > 0) or not np.isfinite(lx) or not np.isfinite(ly):
        raise ValueError("domain lengths must be positive and finite")
    return Grid(int(nx), int(ny), float(lx), float(ly))


def _check_scalar(p, g):
    if np.shape(p) != g.shape:
        raise ValueError(f"scalar field has shape {np.shape(p)}, grid expects {g.shape}")


def _check_vector(vel, g):
    u, v = vel
    if np.shape(u) != g.u_shape or np.shape(v) != g.v_shape:
        raise ValueError(
            f"vector field has shapes {np.shape(u)}, {np.shape(v)}; "
            f"grid expects {g.u_shape}, {g.v_shape}"
        )


def divergence(vel, g):
    """Cell-centered divergence of a face field."""
    _check_vector(vel, g)
    u, v = vel
    return (u[1:, :] - u[:-1, :]) / g.hx + (v[:, 1:] - v[:, :-1]) / g.hy


def gradient(p, g):
    """Face-centered gradient of a cell field; wall faces are set to zero."""
    _check_scalar(p, g)
    gx = np.zeros(g.u_shape)
    gy = np.zeros(g.v_shape)
    gx[1:-1, :] = (p[1:, :] - p[:-1, :]) / g.hx
    gy[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / g.hy
    return gx, gy


def neumann_laplacian(p, g):
    """``divergence(gradient(p))``: the cell Laplacian with no-flux walls."""
    return divergence(gradient(p, g), g)


def cell_inner(a, b, g):
    return float(np.sum(a * b) * g.cell_area)


def face_inner(vel_a, vel_b, g):
    """Face-quadrature inner product ``sum(u_a u_b + v_a v_b) * hx * hy``."""
    return float((np.sum(vel_a[0] * vel_b[0]) + np.sum(vel_a[1] * vel_b[1])) * g.cell_area)


def zero_wall_faces(vel):
    u, v = vel
    u = u.copy()
    v = v.copy()
    u[0, :] = u[-1, :] = 0.0
    v[:, 0] = v[:, -1] = 0.0
    return u, v


def has_zero_wall_faces(vel):
    u, v = vel
    return (
        not np.any(u[0, :]) and not np.any(u[-1, :]) and not np.any(v[:, 0]) and not np.any(v[:, -1])
    )


def _second_diff_dirichlet_ghost(a, h, axis):
    """Second difference along ``axis`` with reflected ghosts (zero wall value)."""
    a = np.moveaxis(a, axis, 0)
    ext = np.concatenate([-a[:1], a, -a[-1:]], axis=0)
    d2 = (ext[:-2] - 2.0 * ext[1:-1] + ext[2:]) / h**2
    return np.moveaxis(d2, 0, axis)


def laplacian_dirichlet(vel, g, mu=1.0):
    """
    Componentwise 5-point Laplacian ``mu * Lap(v)`` with no-slip walls.

    Normal walls are handled by the zero face values themselves; tangential
    walls use a reflected ghost value so the wall value is zero. Wall faces of
    the result are zero.
    """
    _check_vector(vel, g)
    u, v = vel
    lu = np.zeros(g.u_shape)
    lv = np.zeros(g.v_shape)
    lu[1:-1, :] = (u[2:, :] - 2.0 * u[1:-1, :] + u[:-2, :]) / g.hx**2
    lu[1:-1, :] += _second_diff_dirichlet_ghost(u, g.hy, axis=1)[1:-1, :]
    lv[:, 1:-1] = (v[:, 2:] - 2.0 * v[:, 1:-1] + v[:, :-2]) / g.hy**2
    lv[:, 1:-1] += _second_diff_dirichlet_ghost(v, g.hx, axis=0)[:, 1:-1]
    return mu * lu, mu * lv


# --- sparse operator assembly -------------------------------------------------


def _second_diff_1d(n, h, ends):
    """Tridiagonal second-difference matrix; ``ends`` is the corner diagonal value."""
    main = np.full(n, -2.0)
    main[0] = main[-1] = ends
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def dirichlet_cell_matrix(g):
    """Cell-centered Laplacian with reflected ghosts (Dirichlet), C-order unknowns."""
    lx = _second_diff_1d(g.nx, g.hx, -3.0)
    ly = _second_diff_1d(g.ny, g.hy, -3.0)
    return (sp.kron(lx, sp.identity(g.ny)) + sp.kron(sp.identity(g.nx), ly)).tocsr()


def neumann_cell_matrix(g):
    """Cell-centered no-flux Laplacian (equals ``neumann_laplacian``), C-order unknowns."""
    lx = _second_diff_1d(g.nx, g.hx, -1.0)
    ly = _second_diff_1d(g.ny, g.hy, -1.0)
    return (sp.kron(lx, sp.identity(g.ny)) + sp.kron(sp.identity(g.nx), ly)).tocsr()


def velocity_laplacian_matrices(g):
    """
    Laplacians acting on interior face unknowns.

    Returns ``(Au, Av)`` for ``u[1:-1, :]`` and ``v[:, 1:-1]`` flattened in C order.
    """
    lx_node = _second_diff_1d(g.nx - 1, g.hx, -2.0)
    ly_cell = _second_diff_1d(g.ny, g.hy, -3.0)
    au = sp.kron(lx_node, sp.identity(g.ny)) + sp.kron(sp.identity(g.nx - 1), ly_cell)
    lx_cell = _second_diff_1d(g.nx, g.hx, -3.0)
    ly_node = _second_diff_1d(g.ny - 1, g.hy, -2.0)
    av = sp.kron(lx_cell, sp.identity(g.ny - 1)) + sp.kron(sp.identity(g.nx), ly_node)
    return au.tocsr(), av.tocsr()


def divergence_matrix(g):
    """Sparse divergence acting on ``[u[1:-1].ravel(), v[:, 1:-1].ravel()]``."""
    nx, ny = g.nx, g.ny
    # d/dx over interior u faces: cell i gets +u[i+1] - u[i]
    dx_node = sp.diags([np.ones(nx - 1), -np.ones(nx - 1)], [0, -1], shape=(nx, nx - 1)) / g.hx
    dy_node = sp.diags([np.ones(ny - 1), -np.ones(ny - 1)], [0, -1], shape=(ny, ny - 1)) / g.hy
    bx = sp.kron(dx_node, sp.identity(ny))
    by = sp.kron(sp.identity(nx), dy_node)
    return sp.hstack([bx, by]).tocsr()


def pack_interior(vel):
    u, v = vel
    return np.concatenate([u[1:-1, :].ravel(), v[:, 1:-1].ravel()])


def unpack_interior(x, g):
    nu = (g.nx - 1) * g.ny
    u = np.zeros(g.u_shape)
    v = np.zeros(g.v_shape)
    u[1:-1, :] = x[:nu].reshape(g.nx - 1, g.ny)
    v[:, 1:-1] = x[nu:].reshape(g.nx, g.ny - 1)
    return u, v


# --- domain constants ---------------------------------------------------------


@dataclass(frozen=True)
class DomainConstants:
    poincare_constant: float
    lambda1: float
    diameter: float
    iterations: int = 0


POWER_TOL = 1e-8
POWER_MAX_ITER = 10_000


def poincare_constant(g, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    """
    Smallest eigenvalue of the discrete Dirichlet Laplacian by inverse power
    iteration (shift 0), and the Poincare constant ``1 / sqrt(lambda1)``.
    """
    a = (-dirichlet_cell_matrix(g)).tocsc()
    lu = spla.splu(a)
    x, y = g.centers()
    # not orthogonal to the ground state, and deterministic
    q = (x * (g.lx - x) * y * (g.ly - y)).ravel() + 1e-3
    q /= np.linalg.norm(q)
    lam_old = None
    for it in range(1, max_iter + 1):
        z = lu.solve(q)
        q = z / np.linalg.norm(z)
        lam = float(q @ (a @ q))
        if lam_old is not None and abs(lam - lam_old) <= tol * abs(lam):
            return DomainConstants(1.0 / np.sqrt(lam), lam, g.diameter, it)
        lam_old = lam
    raise SolverError(
        "inverse power iteration did not converge", iterations=max_iter,
        residual=abs(lam - lam_old) / abs(lam),
    )


def discrete_lambda1(g):
    """Closed form of the same discrete eigenvalue, for cross-checks."""
    return (4.0 / g.hx**2) * np.sin(np.pi * g.hx / (2 * g.lx)) ** 2 + (
        4.0 / g.hy**2
    ) * np.sin(np.pi * g.hy / (2 * g.ly)) ** 2


def velocity_from_stream_function(psi, g):
    """
    Face velocity ``(d psi/dy, -d psi/dx)`` from a stream function sampled at
    the grid nodes. The discrete divergence vanishes identically (up to
    rounding) because both components difference the same node values.

    ``psi`` is either a callable ``psi(x, y)`` or an ``(nx+1, ny+1)`` node array.
    """
    if callable(psi):
        xn, yn = g.nodes()
        psi = np.asarray(psi(xn, yn), dtype=float)
    if psi.shape != (g.nx + 1, g.ny + 1):
        raise ValueError(f"node stream function must have shape {(g.nx + 1, g.ny + 1)}")
    u = (psi[:, 1:] - psi[:, :-1]) / g.hy
    v = -(psi[1:, :] - psi[:-1, :]) / g.hx
    return u, v
