import numpy as np
import pytest

from patchflow.fieldio import MAGIC, Kind, payload_shape, read_csv, read_field, write_csv, write_field, write_flow_map
from patchflow.grid import make_grid
from patchflow.lagrangian import FlowMap, seed_positions
from patchflow.series import TimeSeries


@pytest.mark.parametrize("kind", list(Kind))
def test_binary_round_trip(tmp_path, kind):
    g = make_grid(11, 9, 1.0, 0.8)
    vals = np.random.default_rng(int(kind)).standard_normal(payload_shape(kind, g))
    write_field(tmp_path / "f.pflow", vals, kind, g, time=0.25)
    snap = read_field(tmp_path / "f.pflow")
    assert np.array_equal(snap.values, vals)
    assert snap.kind == kind and snap.time == 0.25
    assert (snap.grid.nx, snap.grid.ny, snap.grid.ly) == (11, 9, 0.8)


def test_layout_has_x_fastest(tmp_path):
    g = make_grid(8, 9)
    vals = np.arange(72.0).reshape(8, 9)  # vals[i, j] = 9 i + j
    write_field(tmp_path / "f.pflow", vals, Kind.SCALAR, g)
    raw = (tmp_path / "f.pflow").read_bytes()
    assert raw[:8] == MAGIC
    body = np.frombuffer(raw[-72 * 8:], dtype="<f8")
    assert body[:3].tolist() == [0.0, 9.0, 18.0]


def test_bad_files(tmp_path):
    g = make_grid(8, 8)
    with pytest.raises(ValueError):
        write_field(tmp_path / "f.pflow", np.zeros((9, 8)), Kind.SCALAR, g)
    (tmp_path / "junk").write_bytes(b"x" * 64)
    with pytest.raises(ValueError):
        read_field(tmp_path / "junk")
    write_field(tmp_path / "f.pflow", np.zeros(g.shape), Kind.SCALAR, g)
    (tmp_path / "cut.pflow").write_bytes((tmp_path / "f.pflow").read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_field(tmp_path / "cut.pflow")


def test_csv_round_trip(tmp_path):
    vals = np.random.default_rng(0).standard_normal((6, 4))
    write_csv(tmp_path / "f.csv", vals)
    assert np.array_equal(read_csv(tmp_path / "f.csv"), vals)


def test_flow_map_files(tmp_path):
    g = make_grid(8, 8)
    D = np.random.default_rng(1).standard_normal(g.shape + (2, 2))
    write_flow_map(tmp_path, "fm", FlowMap(seed_positions(g), D, 0.5, g))
    assert np.array_equal(read_field(tmp_path / "fm_D21.pflow").values, D[..., 1, 0])
    assert read_field(tmp_path / "fm_Y.pflow").kind == Kind.POSITION_Y


def test_series_round_trip(tmp_path):
    ts = TimeSeries(["t", "a"])
    for k in range(5):
        ts.append({"t": k / 3, "a": np.exp(-k) if k != 2 else np.nan})
    ts.to_csv(tmp_path / "s.csv")
    back = TimeSeries.from_csv(tmp_path / "s.csv")
    assert back.channels == ("t", "a") and len(back) == 5
    assert np.array_equal(back.t, ts.t)
    assert np.array_equal(back["a"], ts["a"], equal_nan=True)
    with pytest.raises(ValueError):
        ts.append({"t": 1.0})
    with pytest.raises(KeyError):
        ts["b"]
