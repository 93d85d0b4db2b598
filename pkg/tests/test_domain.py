import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdri.domain import (
    Acquisition, CamembertSpec, CheckerboardSpec, Grid2D, ShotGather, SlownessSquaredModel, TimeAxis,
    bandpass_ricker, build_camembert, build_checkerboard, cfl_max_dt, crosshole_acquisition,
    model_rmse, perimeter_nodes, perimeter_positions, ricker,
)
from wdri.errors import InvalidArgument
from wdri.propagator import AbsorbingConfig, WaveSolver


def spectrum_peak(w):
    spec = np.abs(np.fft.rfft(w.samples, 8 * w.time.nt))
    freqs = np.fft.rfftfreq(8 * w.time.nt, w.time.dt)
    return freqs[np.argmax(spec)], freqs, spec


# ----------------------------------------------------------------- types

@pytest.mark.parametrize("nx,nz,dx,dz", [(2, 5, 1, 1), (5, 2, 1, 1), (5, 5, 0, 1), (5, 5, 1, -1)])
def test_grid_rejects_bad_shape(nx, nz, dx, dz):
    with pytest.raises(InvalidArgument):
        Grid2D(nx, nz, dx, dz)


def test_grid_index_roundtrip():
    g = Grid2D(11, 7, 5.0, 2.5, origin=(100.0, -10.0))
    for ix, iz in [(0, 0), (10, 6), (3, 4)]:
        assert g.index_of(g.position_of((ix, iz))) == (ix, iz)
    with pytest.raises(InvalidArgument):
        g.index_of((0.0, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(100.0, 9000.0), min_size=9, max_size=9))
def test_velocity_slowness_involution(vs):
    g = Grid2D(3, 3, 1.0, 1.0)
    v = np.array(vs).reshape(3, 3)
    back = SlownessSquaredModel.from_velocity(g, v).velocity
    assert np.max(np.abs(back - v) / v) < 1e-12


def test_model_rejects_nonpositive():
    g = Grid2D(3, 3, 1.0, 1.0)
    with pytest.raises(InvalidArgument):
        SlownessSquaredModel(g, np.zeros((3, 3)))
    with pytest.raises(InvalidArgument):
        SlownessSquaredModel(g, np.full((3, 3), np.nan))
    with pytest.raises(InvalidArgument):
        SlownessSquaredModel(g, np.ones((3, 4)))


def test_model_is_read_only():
    g = Grid2D(3, 3, 1.0, 1.0)
    m = SlownessSquaredModel(g, np.ones((3, 3)))
    with pytest.raises(ValueError):
        m.m[0, 0] = 2.0


def test_time_axis():
    t = TimeAxis(101, 0.01)
    assert t.record_length == pytest.approx(1.0)
    with pytest.raises(InvalidArgument):
        TimeAxis(10, 0.0)


def test_acquisition_rejects_duplicate_receivers():
    g = Grid2D(11, 11, 10.0, 10.0)
    with pytest.raises(InvalidArgument):
        Acquisition(g, [(0, 0)], [(50.0, 50.0), (52.0, 49.0)])
    with pytest.raises(InvalidArgument):
        Acquisition(g, [(0, 0)], [(500.0, 50.0)])


def test_gather_shape_checked():
    t = TimeAxis(10, 0.1)
    with pytest.raises(InvalidArgument):
        ShotGather(0, t, np.zeros((9, 2)))


# ----------------------------------------------------------------- wavelets

def test_ricker_peak_at_delay():
    t = TimeAxis(2500, 0.003)
    w = ricker(10.0, t, delay=0.15)
    assert w.samples[50] == pytest.approx(1.0)
    assert np.max(np.abs(w.samples)) == pytest.approx(1.0)


def test_ricker_formula():
    t = TimeAxis(400, 0.001)
    w = ricker(10.0, t)
    tau = t.times - 0.15
    a = (math.pi * 10.0 * tau) ** 2
    ref = (1 - 2 * a) * np.exp(-a)
    np.testing.assert_allclose(w.samples, ref / np.abs(ref).max(), atol=1e-15)


def test_ricker_camembert_source_spectrum():
    t = TimeAxis(2500, 0.003)
    w = ricker(10.0, t)
    peak, freqs, _ = spectrum_peak(w)
    assert abs(peak - 10.0) <= 1.0 / (t.nt * t.dt)


@pytest.mark.parametrize("f", [0.0, -3.0])
def test_ricker_rejects_frequency(f):
    with pytest.raises(InvalidArgument):
        ricker(f, TimeAxis(100, 0.001))


def test_bandpass_ricker_peak_and_leakage():
    t = TimeAxis(2000, 0.004)
    w = bandpass_ricker(2.5, 5.0, t)
    peak, freqs, spec = spectrum_peak(w)
    assert 3.0 < peak < 4.5
    energy = spec ** 2
    assert energy[freqs > 10.0].sum() / energy.sum() < 0.01
    assert np.max(np.abs(w.samples)) == pytest.approx(1.0)


@pytest.mark.parametrize("low,high", [(5.0, 5.0), (6.0, 5.0), (2.0, 200.0)])
def test_bandpass_rejects_band(low, high):
    with pytest.raises(InvalidArgument):
        bandpass_ricker(low, high, TimeAxis(500, 0.004))


@settings(max_examples=25, deadline=None)
@given(st.floats(2.0, 40.0), st.integers(200, 800))
def test_wavelets_unit_peak_and_finite(f, nt):
    t = TimeAxis(nt, 0.002)
    for w in (ricker(f, t), bandpass_ricker(f * 0.5, f, t)):
        assert np.all(np.isfinite(w.samples))
        assert np.max(np.abs(w.samples)) == pytest.approx(1.0)


# ----------------------------------------------------------------- builders

def test_camembert_defaults():
    m = build_camembert()
    v = m.velocity
    assert m.grid.dx == 35.5
    assert set(np.unique(np.round(v, 6))) == {4000.0, 4600.0}
    cx, cz = m.metadata["centre"]
    assert v[m.grid.index_of((cx, cz))] == pytest.approx(4600.0)
    assert v[0, 0] == pytest.approx(4000.0)


def test_camembert_zero_radius_is_background():
    m = build_camembert(CamembertSpec(radius=0.0, spacing=100.0))
    # the centre node itself is still inside a zero-radius disc only if it hits exactly
    assert np.sum(np.abs(m.velocity - 4000.0) > 1e-9) <= 1


def test_camembert_cell_count():
    spec = CamembertSpec(spacing=50.0, radius=1000.0)
    m = build_camembert(spec)
    count = int(np.sum(m.velocity > 4300))
    area = math.pi * spec.radius ** 2 / spec.spacing ** 2
    ring = 2 * math.pi * spec.radius / spec.spacing
    assert abs(count - area) <= ring


def test_camembert_outside_grid():
    with pytest.raises(InvalidArgument):
        build_camembert(CamembertSpec(radius=3000.0))


def test_checkerboard_defaults():
    m = build_checkerboard()
    assert m.grid.shape == (101, 101)
    assert m.grid.dx == 20.0
    assert set(np.unique(np.round(m.velocity, 6))) == {1500.0, 4000.0}


def test_checkerboard_zero_perturbation():
    m = build_checkerboard(CheckerboardSpec(perturbation=0.0))
    np.testing.assert_allclose(m.velocity, 1500.0)


def test_checkerboard_adjacent_tiles_differ():
    spec = CheckerboardSpec()
    v = build_checkerboard(spec).velocity
    n = int(spec.tile / spec.spacing)
    centres = np.arange(n // 2, spec.nx, n)
    tiles = v[np.ix_(centres, centres)]
    assert np.all(tiles[1:, :] != tiles[:-1, :])
    assert np.all(tiles[:, 1:] != tiles[:, :-1])


def test_checkerboard_misaligned_tile():
    with pytest.raises(InvalidArgument):
        build_checkerboard(CheckerboardSpec(tile=210.0))


def test_builders_deterministic():
    a, b = build_camembert(), build_camembert()
    assert a.m.tobytes() == b.m.tobytes()
    c, d = build_checkerboard(), build_checkerboard()
    assert c.m.tobytes() == d.m.tobytes()


# ----------------------------------------------------------------- CFL

def test_cfl_value():
    g = Grid2D(11, 11, 20.0, 20.0)
    m = SlownessSquaredModel.from_velocity(g, np.full(g.shape, 2000.0))
    assert cfl_max_dt(m) == pytest.approx(0.9 * 20 / (2000 * math.sqrt(2)))
    assert cfl_max_dt(m) == pytest.approx(6.364e-3, rel=1e-3)


def test_cfl_scaling():
    g1, g2 = Grid2D(11, 11, 10.0, 10.0), Grid2D(11, 11, 20.0, 20.0)
    m1 = SlownessSquaredModel.from_velocity(g1, np.full(g1.shape, 2000.0))
    m2 = SlownessSquaredModel.from_velocity(g2, np.full(g2.shape, 2000.0))
    m3 = SlownessSquaredModel.from_velocity(g1, np.full(g1.shape, 4000.0))
    assert cfl_max_dt(m2) == pytest.approx(2 * cfl_max_dt(m1))
    assert cfl_max_dt(m3) == pytest.approx(0.5 * cfl_max_dt(m1))


def _impulse_growth(dt, steps=1000):
    g = Grid2D(31, 31, 20.0, 20.0)
    m = SlownessSquaredModel.from_velocity(g, np.full(g.shape, 2000.0))
    t = TimeAxis(steps, dt)
    solver = WaveSolver(m, t, AbsorbingConfig(layer_width=0), check_cfl=False)
    src = np.zeros(steps)
    src[1] = 1.0
    acq = Acquisition(g, [(300.0, 300.0)], [(300.0, 300.0)])
    from wdri.domain import Wavelet
    _, gather = solver.forward(Wavelet(src, 1.0, 0.0, t), (300.0, 300.0), acq, "none")
    tr = np.abs(gather.traces[:, 0])
    return tr[-100:].max() / tr[:100].max()


def test_cfl_bound_separates_stable_and_unstable():
    # the undamped scheme's true limit is dx/(v*sqrt(2)); the bound sits 10% below it
    limit = 20.0 / (2000.0 * math.sqrt(2))
    assert _impulse_growth(0.99 * limit) < 10.0
    assert not _impulse_growth(1.02 * limit) < 1e3


def test_stability_error_raised():
    from wdri.errors import StabilityError
    g = Grid2D(11, 11, 20.0, 20.0)
    m = SlownessSquaredModel.from_velocity(g, np.full(g.shape, 2000.0))
    with pytest.raises(StabilityError) as exc:
        WaveSolver(m, TimeAxis(10, 0.01))
    assert exc.value.dt_max == pytest.approx(cfl_max_dt(m))


# ----------------------------------------------------------------- layouts

def test_perimeter_positions_inside_and_spread():
    g = Grid2D(51, 51, 40.0, 40.0)
    pts = perimeter_positions(g, 80.0, 24)
    assert len(pts) == 24
    for x, z in pts:
        assert 80.0 - 1e-9 <= x <= 1920.0 + 1e-9 and 80.0 - 1e-9 <= z <= 1920.0 + 1e-9
    nodes = perimeter_nodes(g, 1, 100)
    assert len({g.index_of(p) for p in nodes}) == len(nodes)


def test_crosshole_layout():
    g = Grid2D(69, 86, 71.0, 71.0)
    acq = crosshole_acquisition(g, 7, 85)
    assert acq.n_shots == 7
    assert acq.nr == 85
    assert acq.source_indices[:, 0].max() < acq.receiver_indices[:, 0].min()


def test_model_rmse():
    g = Grid2D(3, 3, 1.0, 1.0)
    a = SlownessSquaredModel.from_velocity(g, np.full((3, 3), 2000.0))
    b = SlownessSquaredModel.from_velocity(g, np.full((3, 3), 2003.0))
    assert model_rmse(a, b) == pytest.approx(3.0)
    assert model_rmse(a, a) == 0.0
