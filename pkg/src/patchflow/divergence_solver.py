"""
Right inverse of the discrete divergence with zero wall values.

Among all face fields ``b`` with ``div_h b = f`` and zero wall faces we return
the one of least Dirichlet energy ``|grad b|^2``. Its optimality system is a
Stokes problem, solved here by Uzawa's method: conjugate gradients on the
pressure Schur complement ``S = B L^{-1} B^T`` with the vector Laplacian ``L``
factored once per grid.
"""

from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .grid import divergence, divergence_matrix, unpack_interior, velocity_laplacian_matrices
from .lagrangian import cofactor_matrix, delta_A_2d, lagrangian_velocity
from .metrics import face_to_center, h1_seminorm

RESIDUAL_TOL = 1e-8
MEAN_TOL = 1e-10
CG_RTOL = 1e-13
CG_MAX_ITER = 2000


class DivergenceSolution(NamedTuple):
    b: tuple
    residual: float
    iterations: int
    b_ratio: float = float("nan")
    grad_ratio: float = float("nan")


@lru_cache(maxsize=4)
def _stokes_parts(g):
    au, av = velocity_laplacian_matrices(g)
    lap = (-sp.block_diag([au, av])).tocsc()
    return spla.splu(lap), divergence_matrix(g)


def _l2(a, g):
    return float(np.sqrt(np.sum(a**2) * g.cell_area))


def zero_mean_rhs(f, g):
    f = np.asarray(f, dtype=float)
    if f.shape != g.shape:
        raise ValueError(f"right-hand side has shape {f.shape}, grid expects {g.shape}")
    total = float(np.sum(f))
    if abs(total) > MEAN_TOL * float(np.sum(np.abs(f))):
        raise ValueError("the divergence equation needs a right-hand side of zero mean")
    return f - total / f.size


def cell_vector_to_faces(q, g):
    """Average a cell-centered vector ``(nx, ny, 2)`` to interior faces; wall faces are zero."""
    u = np.zeros(g.u_shape)
    v = np.zeros(g.v_shape)
    u[1:-1, :] = 0.5 * (q[1:, :, 0] + q[:-1, :, 0])
    v[:, 1:-1] = 0.5 * (q[:, 1:, 1] + q[:, :-1, 1])
    return u, v


def faces_to_cell_vector(vel):
    uc, vc = face_to_center(vel)
    return np.stack([uc, vc], axis=-1)


def solve_divergence(f, g, A=None, d=None, tol=RESIDUAL_TOL, max_iter=CG_MAX_ITER):
    """
    Least-energy ``b`` with ``div_h b = f`` and zero wall faces.

    When the factored form ``f = div(A d)`` is supplied (``A`` as
    ``(nx, ny, 2, 2)``, ``d`` as a cell vector ``(nx, ny, 2)``), the ratios
    ``|b|_2 / |A d|_2`` and ``|grad b|_2 / |A^T grad d|_2`` are reported.
    """
    f = zero_mean_rhs(f, g)
    if not np.any(f):
        return DivergenceSolution(g.zero_vector(), 0.0, 0)
    lu, bmat = _stokes_parts(g)
    n = g.nx * g.ny
    schur = spla.LinearOperator((n, n), matvec=lambda lam: bmat @ lu.solve(bmat.T @ lam))
    rhs = f.ravel()
    count = [0]

    def tick(_):
        count[0] += 1

    lam, info = spla.cg(schur, rhs, rtol=CG_RTOL, atol=0.0, maxiter=max_iter, callback=tick)
    x = lu.solve(bmat.T @ lam)
    b = unpack_interior(x, g)
    residual = _l2(divergence(b, g) - f, g)
    if residual > tol * max(1.0, _l2(f, g)):
        raise SolverError("divergence solve missed its tolerance",
                          iterations=count[0], residual=residual)
    b_ratio = grad_ratio = float("nan")
    if A is not None and d is not None:
        ad = np.einsum("...ij,...j->...i", A, d)
        grad_d = np.stack(np.gradient(d, g.hx, g.hy, axis=(0, 1)), axis=-1)  # [..., i, j] = d_i / d x_j
        atgd = np.swapaxes(A, -1, -2) @ grad_d
        b_ratio = _l2(faces_to_cell_vector(b), g) / max(_l2(ad, g), 1e-300)
        grad_ratio = h1_seminorm(b, g) / max(_l2(atgd, g), 1e-300)
    return DivergenceSolution(b, residual, count[0], b_ratio, grad_ratio)


class Decomposition(NamedTuple):
    w: np.ndarray
    z: np.ndarray
    delta_u: np.ndarray
    w_bar: tuple
    solver_residual: float
    z_residual: float


def divergence_of_cell_vector(q, g):
    return divergence(cell_vector_to_faces(q, g), g)


def decompose_difference(fm1, fm2, vel1, vel2):
    """
    Split ``du = u2 - u1`` (Lagrangian velocities at the particles) as
    ``du = w + z``: ``w = (A1)^{-1} w_bar`` where ``w_bar`` is the least-energy
    solution of ``div w_bar = div(dA u2)``, ``dA = A1 - A2``.

    Returns cell vectors ``w``, ``z``, ``delta_u`` (``(nx, ny, 2)``), the face
    field ``w_bar``, the residual of the divergence solve, and the measured
    ``|div(A1 z)|_2``, which vanishes only up to the discretisation error of
    the Lagrangian divergence.
    """
    g = fm1.grid
    u1 = lagrangian_velocity(vel1, fm1)
    u2 = lagrangian_velocity(vel2, fm2)
    du = u2 - u1
    dA = delta_A_2d(fm1, fm2)
    f = divergence_of_cell_vector(np.einsum("...ij,...j->...i", dA, u2), g)
    if not np.any(dA):
        zero = np.zeros_like(du)
        return Decomposition(zero, du.copy(), du, g.zero_vector(), 0.0,
                             _l2(divergence_of_cell_vector(
                                 np.einsum("...ij,...j->...i", cofactor_matrix(fm1), du), g), g))
    sol = solve_divergence(f, g)
    w = np.einsum("...ij,...j->...i", fm1.jacobian, faces_to_cell_vector(sol.b))
    z = du - w
    a1z = np.einsum("...ij,...j->...i", cofactor_matrix(fm1), z)
    return Decomposition(w, z, du, sol.b, sol.residual, _l2(divergence_of_cell_vector(a1z, g), g))
