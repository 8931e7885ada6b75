"""
Binary field snapshots and CSV export.

Layout (little-endian): 8-byte magic ``PFLOW01\\0``, ``u32`` kind, ``u32 nx``,
``u32 ny`` (the grid's cell counts), ``f64 lx``, ``f64 ly``, ``f64 time``,
then the values as ``f64`` in row-major order with rows running along y, so
x varies fastest.
"""

import struct
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .grid import Grid

MAGIC = b"PFLOW01\x00"
_HEADER = struct.Struct("<8sIII3d")


class Kind(IntEnum):
    SCALAR = 0
    VECTOR_X = 1
    VECTOR_Y = 2
    POSITION_X = 3
    POSITION_Y = 4
    D11 = 5
    D12 = 6
    D21 = 7
    D22 = 8


def payload_shape(kind, g):
    """Array shape (indexed ``[i, j]``) of a field of the given kind."""
    kind = Kind(kind)
    if kind == Kind.VECTOR_X:
        return g.u_shape
    if kind == Kind.VECTOR_Y:
        return g.v_shape
    return g.shape


class Snapshot(NamedTuple):
    values: np.ndarray
    kind: Kind
    grid: Grid
    time: float


def write_field(path, values, kind, g, time=0.0):
    values = np.asarray(values, dtype=float)
    if values.shape != payload_shape(kind, g):
        raise ValueError(f"{Kind(kind).name} field must have shape {payload_shape(kind, g)}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, int(kind), g.nx, g.ny, g.lx, g.ly, float(time)))
        fh.write(np.ascontiguousarray(values.T).astype("<f8").tobytes())


def read_field(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, kind, nx, ny, lx, ly, time = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a field snapshot")
    g = Grid(nx, ny, lx, ly)
    shape = payload_shape(kind, g)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: payload has {body.size} values, expected {shape[0] * shape[1]}")
    values = body.reshape(shape[1], shape[0]).T.copy()
    return Snapshot(values, Kind(kind), g, time)


def write_csv(path, values):
    """Plain-text dump, one row per y index (the same ordering as the binary payload)."""
    np.savetxt(path, np.asarray(values).T, delimiter=",", fmt="%.17g")


def read_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2).T


def write_state(directory, stem, state):
    """Density, both velocity components and pressure of a solution state."""
    g = state.grid
    write_field(directory / f"{stem}_rho.pflow", state.rho, Kind.SCALAR, g, state.t)
    write_field(directory / f"{stem}_u.pflow", state.vel[0], Kind.VECTOR_X, g, state.t)
    write_field(directory / f"{stem}_v.pflow", state.vel[1], Kind.VECTOR_Y, g, state.t)
    write_field(directory / f"{stem}_p.pflow", state.p, Kind.SCALAR, g, state.t)


def write_flow_map(directory, stem, fm):
    g = fm.grid
    write_field(directory / f"{stem}_X.pflow", fm.X[..., 0], Kind.POSITION_X, g, fm.t)
    write_field(directory / f"{stem}_Y.pflow", fm.X[..., 1], Kind.POSITION_Y, g, fm.t)
    for kind, (a, b) in zip((Kind.D11, Kind.D12, Kind.D21, Kind.D22),
                            ((0, 0), (0, 1), (1, 0), (1, 1))):
        write_field(directory / f"{stem}_{kind.name}.pflow", fm.D[..., a, b], kind, g, fm.t)
