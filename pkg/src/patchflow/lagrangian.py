"""
Flow maps of discrete velocity histories.

Particles sit at cell centers at ``t = 0``. Positions are advanced with the
explicit midpoint rule using velocities that are bilinear in space and linear
in time. Alongside, ``M = Id + D`` with ``D = int_0^t grad_y u`` obeys
``dM/dt = G(t, X) M`` where ``G = grad_x v``; it is advanced with the
trapezoidal (Cayley) rule

    (Id - dt/2 G1) M1 = (Id + dt/2 G0) M0,

which keeps ``det M`` fixed whenever ``G`` is traceless with a steady
determinant along the path, so measure preservation is only spoiled by
interpolation and position errors.

Particle arrays are shaped like the cell grid: positions ``(nx, ny, 2)`` and
matrices ``(nx, ny, 2, 2)``.
"""

from dataclasses import dataclass

import numpy as np

from .grid import Grid
from .metrics import velocity_gradient_centers

MAX_CLAMP_FRACTION = 1e-3


def _bilinear(arr, x0, hx, y0, hy, x, y):
    """Sample a node-ordered array (``arr[i, j]`` at ``(x0 + i hx, y0 + j hy)``)."""
    n, m = arr.shape[:2]
    s = (x - x0) / hx
    r = (y - y0) / hy
    i = np.clip(np.floor(s).astype(int), 0, n - 2)
    j = np.clip(np.floor(r).astype(int), 0, m - 2)
    a = np.clip(s - i, 0.0, 1.0)
    b = np.clip(r - j, 0.0, 1.0)
    if arr.ndim > 2:
        trail = (1,) * (arr.ndim - 2)
        a = a.reshape(a.shape + trail)
        b = b.reshape(b.shape + trail)
    return ((1 - a) * (1 - b) * arr[i, j] + a * (1 - b) * arr[i + 1, j]
            + (1 - a) * b * arr[i, j + 1] + a * b * arr[i + 1, j + 1])


class MacField:
    """Bilinear sampling of one MAC velocity field and of its cell-centered gradient."""

    def __init__(self, vel, g):
        u, v = vel
        self.grid = g
        # reflected ghost layers make the tangential wall value zero
        self._u = np.concatenate([-u[:, :1], u, -u[:, -1:]], axis=1)
        self._v = np.concatenate([-v[:1, :], v, -v[-1:, :]], axis=0)
        self._vel = vel
        self._grad = None

    def velocity(self, pos):
        g = self.grid
        x, y = pos[..., 0], pos[..., 1]
        out = np.empty(pos.shape)
        out[..., 0] = _bilinear(self._u, 0.0, g.hx, -0.5 * g.hy, g.hy, x, y)
        out[..., 1] = _bilinear(self._v, -0.5 * g.hx, g.hx, 0.0, g.hy, x, y)
        return out

    def gradient(self, pos):
        g = self.grid
        if self._grad is None:
            self._grad = velocity_gradient_centers(self._vel, g)
        return _bilinear(self._grad, 0.5 * g.hx, g.hx, 0.5 * g.hy, g.hy, pos[..., 0], pos[..., 1])


class VelocityHistory:
    """
    MAC velocity fields at increasing times, linear in time between them.

    Only the two fields around the requested time are touched, so the class
    also serves as a one-step window (``VelocityHistory.step``).
    """

    def __init__(self, times, fields, g):
        if len(times) != len(fields) or len(times) < 1:
            raise ValueError("need one field per time")
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) <= 0):
            raise ValueError("history times must increase strictly")
        self.times = times
        self.grid = g
        self._samplers = [MacField(f, g) for f in fields]

    @classmethod
    def step(cls, vel_old, vel_new, t0, t1, g):
        return cls([t0, t1], [vel_old, vel_new], g)

    def _locate(self, t):
        times = self.times
        span = 1e-12 * max(1.0, abs(times[-1]))
        if t < times[0] - span or t > times[-1] + span:
            raise ValueError(f"time {t} outside the history [{times[0]}, {times[-1]}]")
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, max(len(times) - 2, 0)))
        if len(times) == 1:
            return 0, 0.0
        theta = (t - times[k]) / (times[k + 1] - times[k])
        return k, float(np.clip(theta, 0.0, 1.0))

    def _blend(self, t, pos, method):
        k, theta = self._locate(t)
        a = getattr(self._samplers[k], method)(pos)
        if theta == 0.0:
            return a
        b = getattr(self._samplers[k + 1], method)(pos)
        if theta == 1.0:
            return b
        return (1 - theta) * a + theta * b

    def velocity(self, t, pos):
        return self._blend(t, pos, "velocity")

    def gradient(self, t, pos):
        return self._blend(t, pos, "gradient")


class AnalyticHistory:
    """
    History given by callables, for synthetic tests.

    ``velocity_fn(t, x, y) -> (vx, vy)`` and
    ``gradient_fn(t, x, y) -> ((dvx/dx, dvx/dy), (dvy/dx, dvy/dy))``.
    """

    def __init__(self, times, velocity_fn, gradient_fn):
        self.times = np.asarray(times, dtype=float)
        self._v = velocity_fn
        self._g = gradient_fn

    def velocity(self, t, pos):
        vx, vy = self._v(t, pos[..., 0], pos[..., 1])
        out = np.empty(pos.shape)
        out[..., 0] = vx
        out[..., 1] = vy
        return out

    def gradient(self, t, pos):
        (a, b), (c, d) = self._g(t, pos[..., 0], pos[..., 1])
        out = np.empty(pos.shape[:-1] + (2, 2))
        out[..., 0, 0] = a
        out[..., 0, 1] = b
        out[..., 1, 0] = c
        out[..., 1, 1] = d
        return out


class BlendedHistory:
    """``(2 - s) v1 + (s - 1) v2`` on the common time grid of two histories."""

    def __init__(self, h1, h2, s):
        if not 1.0 <= s <= 2.0:
            raise ValueError("s must lie in [1, 2]")
        if len(h1.times) != len(h2.times) or np.any(h1.times != h2.times):
            raise ValueError("histories must share their time grid")
        self.times = h1.times
        self._h = (h1, h2)
        self._w = (2.0 - s, s - 1.0)

    def velocity(self, t, pos):
        return self._w[0] * self._h[0].velocity(t, pos) + self._w[1] * self._h[1].velocity(t, pos)

    def gradient(self, t, pos):
        return self._w[0] * self._h[0].gradient(t, pos) + self._w[1] * self._h[1].gradient(t, pos)


@dataclass(frozen=True)
class FlowMap:
    X: np.ndarray
    D: np.ndarray
    t: float
    grid: Grid
    clamp_events: int = 0
    particle_steps: int = 0

    @property
    def jacobian(self):
        return np.eye(2) + self.D

    def det(self):
        m = self.jacobian
        return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]

    def max_det_error(self):
        return float(np.max(np.abs(self.det() - 1.0)))

    @property
    def clamp_fraction(self):
        return self.clamp_events / self.particle_steps if self.particle_steps else 0.0


def seed_positions(g):
    x, y = g.centers()
    return np.stack([x, y], axis=-1)


def _solve2(a, b):
    """Batched ``a^{-1} b`` for 2x2 matrices."""
    det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    inv = np.empty_like(a)
    inv[..., 0, 0] = a[..., 1, 1]
    inv[..., 1, 1] = a[..., 0, 0]
    inv[..., 0, 1] = -a[..., 0, 1]
    inv[..., 1, 0] = -a[..., 1, 0]
    inv /= det[..., None, None]
    return inv @ b


class FlowTracker:
    """Mutable particle state advanced one step at a time; ``snapshot()`` freezes it."""

    def __init__(self, g, max_clamp_fraction=MAX_CLAMP_FRACTION):
        self.grid = g
        self.X = seed_positions(g)
        self.D = np.zeros(g.shape + (2, 2))
        self.t = 0.0
        self.clamp_events = 0
        self.particle_steps = 0
        self.max_clamp_fraction = max_clamp_fraction

    def _clamp(self, pos):
        g = self.grid
        out = np.empty_like(pos)
        out[..., 0] = np.clip(pos[..., 0], 0.0, g.lx)
        out[..., 1] = np.clip(pos[..., 1], 0.0, g.ly)
        hit = np.any(out != pos, axis=-1)
        return out, hit

    def advance(self, history, t0, t1):
        dt = t1 - t0
        eye = np.eye(2)
        v0 = history.velocity(t0, self.X)
        mid, hit0 = self._clamp(self.X + 0.5 * dt * v0)
        vm = history.velocity(t0 + 0.5 * dt, mid)
        new, hit1 = self._clamp(self.X + dt * vm)
        g0 = history.gradient(t0, self.X)
        g1 = history.gradient(t1, new)
        m0 = eye + self.D
        m1 = _solve2(eye - 0.5 * dt * g1, (eye + 0.5 * dt * g0) @ m0)
        self.D = m1 - eye
        self.X = new
        self.t = t1
        self.clamp_events += int(np.count_nonzero(hit0 | hit1))
        self.particle_steps += hit1.size
        if self.clamp_events > self.max_clamp_fraction * self.particle_steps:
            raise RuntimeError(
                f"particles left the domain in {self.clamp_events} of "
                f"{self.particle_steps} particle-steps; the velocity history is inconsistent"
            )

    def snapshot(self):
        return FlowMap(self.X.copy(), self.D.copy(), self.t, self.grid,
                       self.clamp_events, self.particle_steps)


def _step_times(history, t_end):
    times = np.asarray(history.times, dtype=float)
    if times[0] != 0.0:
        raise ValueError("history must start at t = 0")
    if t_end > times[-1] * (1 + 1e-12) + 1e-300:
        raise ValueError(f"history ends at {times[-1]}, before t_end = {t_end}")
    inner = times[(times > 0) & (times < t_end)]
    return np.concatenate([[0.0], inner, [t_end]]) if t_end > 0 else np.array([0.0])


def integrate_flow(history, g, t_end, max_clamp_fraction=MAX_CLAMP_FRACTION):
    """Flow map at ``t_end``, stepping on the history's own time grid."""
    tracker = FlowTracker(g, max_clamp_fraction)
    times = _step_times(history, t_end)
    for t0, t1 in zip(times[:-1], times[1:]):
        tracker.advance(history, t0, t1)
    return tracker.snapshot()


def intermediate_flow(h1, h2, s, g, t_end, max_clamp_fraction=MAX_CLAMP_FRACTION):
    """Flow of ``(2 - s) v1 + (s - 1) v2``; ``s = 1`` and ``s = 2`` reproduce the end members exactly."""
    if not 1.0 <= s <= 2.0:
        raise ValueError("s must lie in [1, 2]")
    if s == 1.0:
        return integrate_flow(h1, g, t_end, max_clamp_fraction)
    if s == 2.0:
        return integrate_flow(h2, g, t_end, max_clamp_fraction)
    return integrate_flow(BlendedHistory(h1, h2, s), g, t_end, max_clamp_fraction)


def backward_positions(history, g, t_end):
    """
    Where the particle found at each cell center at ``t_end`` started, by
    integrating the trajectories backwards. This is the sampled inverse map.
    """
    times = _step_times(history, t_end)[::-1]
    pos = seed_positions(g)
    for t1, t0 in zip(times[:-1], times[1:]):
        dt = t0 - t1  # negative
        mid = pos + 0.5 * dt * history.velocity(t1, pos)
        pos = pos + dt * history.velocity(t1 + 0.5 * dt, mid)
        pos[..., 0] = np.clip(pos[..., 0], 0.0, g.lx)
        pos[..., 1] = np.clip(pos[..., 1], 0.0, g.ly)
    return pos


# --- algebra ------------------------------------------------------------------


def cofactor_matrix(fm):
    """Transposed cofactor of ``Id + D``: ``[[d, -b], [-c, a]]`` for ``[[a, b], [c, d]]``."""
    m = fm.jacobian if isinstance(fm, FlowMap) else np.eye(2) + fm
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out


def delta_A_2d(fm1, fm2):
    """
    ``A1 - A2`` written through the accumulated gradient difference
    ``dD = D1 - D2``: ``[[dD22, -dD12], [-dD21, dD11]]``.
    """
    if fm1.grid != fm2.grid or fm1.X.shape != fm2.X.shape:
        raise ValueError("flow maps are seeded on different grids")
    if abs(fm1.t - fm2.t) > 1e-12 * max(1.0, abs(fm1.t)):
        raise ValueError(f"flow maps are at different times ({fm1.t} and {fm2.t})")
    dd = fm1.D - fm2.D
    out = np.empty_like(dd)
    out[..., 0, 0] = dd[..., 1, 1]
    out[..., 1, 1] = dd[..., 0, 0]
    out[..., 0, 1] = -dd[..., 0, 1]
    out[..., 1, 0] = -dd[..., 1, 0]
    return out


def position_jacobian_fd(fm):
    """``grad_y X`` by centered differences of neighbouring particles (interior cells), for cross-checks."""
    g = fm.grid
    X = fm.X
    jac = np.full(g.shape + (2, 2), np.nan)
    jac[1:-1, :, :, 0] = (X[2:, :] - X[:-2, :]) / (2 * g.hx)
    jac[:, 1:-1, :, 1] = (X[:, 2:] - X[:, :-2]) / (2 * g.hy)
    return jac


# --- Eulerian <-> Lagrangian ----------------------------------------------------


def pull_back(f, fm):
    """
    ``f(X(t, y))`` at every particle: ``f`` is a cell field (returned with
    the grid shape) or a MAC vector field (returned with a trailing axis of 2).
    """
    g = fm.grid
    if isinstance(f, tuple):
        return MacField(f, g).velocity(fm.X)
    f = np.asarray(f, dtype=float)
    if f.shape != g.shape:
        raise ValueError("field does not match the flow map grid")
    return _bilinear(f, 0.5 * g.hx, g.hx, 0.5 * g.hy, g.hy, fm.X[..., 0], fm.X[..., 1])


def sample_cell_field(f, pos, g):
    return _bilinear(f, 0.5 * g.hx, g.hx, 0.5 * g.hy, g.hy, pos[..., 0], pos[..., 1])


def lagrangian_velocity(vel, fm):
    """``u(t, y) = v(t, X(t, y))`` at every particle."""
    return pull_back(vel, fm)


def lagrangian_velocity_gradient(vel, fm):
    """``grad_y u = grad_x v(X) (Id + D)`` at every particle."""
    return MacField(vel, fm.grid).gradient(fm.X) @ fm.jacobian


def eulerian_to_lagrangian_velocity(history, g, t_end=None):
    """Particle velocities at every history time up to ``t_end``: list of ``(t, u)``."""
    t_end = history.times[-1] if t_end is None else t_end
    tracker = FlowTracker(g)
    times = _step_times(history, t_end)
    out = [(0.0, history.velocity(0.0, tracker.X))]
    for t0, t1 in zip(times[:-1], times[1:]):
        tracker.advance(history, t0, t1)
        out.append((t1, history.velocity(t1, tracker.X)))
    return out


def lagrangian_density_residual(rho_t, rho0, fm):
    """``|| rho(t, X(t, .)) - rho0 ||_1`` with midpoint quadrature over particles."""
    g = fm.grid
    return float(np.sum(np.abs(pull_back(rho_t, fm) - rho0)) * g.cell_area)
