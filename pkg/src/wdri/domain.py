"""Core value types, source wavelets and synthetic benchmark models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import InvalidArgument

Position = tuple[float, float]


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Grid2D:
    """Regular node-centred grid. Arrays indexed ``[ix, iz]`` (z fastest)."""

    nx: int
    nz: int
    dx: float
    dz: float
    origin: Position = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 3 or self.nz < 3:
            raise InvalidArgument(f"grid needs at least 3x3 nodes, got {self.nx}x{self.nz}")
        if not (self.dx > 0 and self.dz > 0):
            raise InvalidArgument(f"grid spacing must be positive, got dx={self.dx}, dz={self.dz}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nz)

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + self.dx * np.arange(self.nx)

    @property
    def z(self) -> np.ndarray:
        return self.origin[1] + self.dz * np.arange(self.nz)

    @property
    def extent(self) -> tuple[float, float]:
        return ((self.nx - 1) * self.dx, (self.nz - 1) * self.dz)

    def index_of(self, position: Position) -> tuple[int, int]:
        """Nearest grid node of a physical position; raises if outside the grid."""
        x, z = position
        fx = (x - self.origin[0]) / self.dx
        fz = (z - self.origin[1]) / self.dz
        ix, iz = int(round(fx)), int(round(fz))
        if not (0 <= ix < self.nx and 0 <= iz < self.nz):
            raise InvalidArgument(f"position ({x}, {z}) lies outside the grid")
        return ix, iz

    def position_of(self, index: tuple[int, int]) -> Position:
        return (self.origin[0] + index[0] * self.dx, self.origin[1] + index[1] * self.dz)


@dataclass(frozen=True)
class SlownessSquaredModel:
    """Squared slowness ``m = 1/v**2`` (s^2/m^2) sampled on a grid."""

    grid: Grid2D
    m: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        m = _frozen(self.m)
        if m.shape != self.grid.shape:
            raise InvalidArgument(f"model shape {m.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(m)) or not np.all(m > 0):
            raise InvalidArgument("slowness-squared must be finite and strictly positive")
        object.__setattr__(self, "m", m)

    @classmethod
    def from_velocity(cls, grid: Grid2D, velocity, metadata: dict | None = None) -> "SlownessSquaredModel":
        v = np.asarray(velocity, dtype=np.float64)
        if not np.all(np.isfinite(v)) or not np.all(v > 0):
            raise InvalidArgument("velocity must be finite and strictly positive")
        return cls(grid, 1.0 / (v * v), metadata or {})

    @property
    def velocity(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.m)

    @property
    def v_max(self) -> float:
        return float(1.0 / math.sqrt(self.m.min()))

    @property
    def v_min(self) -> float:
        return float(1.0 / math.sqrt(self.m.max()))

    def with_m(self, m) -> "SlownessSquaredModel":
        return SlownessSquaredModel(self.grid, m, dict(self.metadata))


@dataclass(frozen=True)
class TimeAxis:
    nt: int
    dt: float

    def __post_init__(self):
        if self.nt < 1:
            raise InvalidArgument(f"nt must be positive, got {self.nt}")
        if not self.dt > 0:
            raise InvalidArgument(f"dt must be positive, got {self.dt}")

    @property
    def record_length(self) -> float:
        return (self.nt - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.nt)


@dataclass(frozen=True)
class Acquisition:
    """Source and receiver positions snapped to grid nodes.

    The receiver index map realizes the sampling operator P: the same
    receiver spread records every shot.
    """

    grid: Grid2D
    sources: tuple[Position, ...]
    receivers: tuple[Position, ...]

    def __post_init__(self):
        sources = tuple((float(x), float(z)) for x, z in self.sources)
        receivers = tuple((float(x), float(z)) for x, z in self.receivers)
        if not receivers:
            raise InvalidArgument("acquisition needs at least one receiver")
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "receivers", receivers)
        src = np.array([self.grid.index_of(p) for p in sources], dtype=np.int64).reshape(-1, 2)
        rec = np.array([self.grid.index_of(p) for p in receivers], dtype=np.int64).reshape(-1, 2)
        if len({tuple(r) for r in rec}) != len(rec):
            raise InvalidArgument("two receivers snap to the same grid node")
        src.setflags(write=False)
        rec.setflags(write=False)
        object.__setattr__(self, "source_indices", src)
        object.__setattr__(self, "receiver_indices", rec)

    @property
    def n_shots(self) -> int:
        return len(self.sources)

    @property
    def nr(self) -> int:
        return len(self.receivers)

    def receiver_coordinates(self) -> np.ndarray:
        """Snapped receiver coordinates, shape (nr, 2)."""
        return np.array([self.grid.position_of(tuple(i)) for i in self.receiver_indices])


@dataclass(frozen=True)
class Wavelet:
    samples: np.ndarray
    peak_frequency: float
    delay: float
    time: TimeAxis

    def __post_init__(self):
        s = _frozen(self.samples)
        if s.shape != (self.time.nt,):
            raise InvalidArgument(f"wavelet has {s.size} samples, time axis has {self.time.nt}")
        if not np.all(np.isfinite(s)):
            raise InvalidArgument("wavelet samples must be finite")
        object.__setattr__(self, "samples", s)

    def halfwidth(self, fraction: float = 0.01) -> float:
        """Half the duration of the support where ``|w| > fraction * peak``."""
        above = np.flatnonzero(np.abs(self.samples) > fraction * np.abs(self.samples).max())
        if above.size == 0:
            return 0.0
        return 0.5 * (above[-1] - above[0]) * self.time.dt


@dataclass(frozen=True)
class ShotGather:
    """Receiver traces of one shot, shape (nt, nr)."""

    shot_id: int
    time: TimeAxis
    traces: np.ndarray
    receivers: np.ndarray | None = None

    def __post_init__(self):
        tr = np.asarray(self.traces, dtype=np.float64)
        if tr.ndim != 2 or tr.shape[0] != self.time.nt:
            raise InvalidArgument(f"traces shape {tr.shape} inconsistent with nt={self.time.nt}")
        object.__setattr__(self, "traces", tr)
        if self.receivers is not None:
            rc = np.asarray(self.receivers, dtype=np.float64).reshape(-1, 2)
            if rc.shape[0] != tr.shape[1]:
                raise InvalidArgument("receiver coordinates do not match trace count")
            object.__setattr__(self, "receivers", rc)

    @property
    def nr(self) -> int:
        return self.traces.shape[1]

    def with_traces(self, traces) -> "ShotGather":
        return ShotGather(self.shot_id, self.time, traces, self.receivers)


def _unit_peak(samples: np.ndarray) -> np.ndarray:
    peak = np.abs(samples).max()
    if peak == 0 or not np.isfinite(peak):
        raise InvalidArgument("wavelet vanishes on the time axis")
    return samples / peak


def ricker(peak_frequency: float, time: TimeAxis, delay: float | None = None) -> Wavelet:
    """Ricker wavelet normalized to unit peak; default delay 1.5/f keeps it causal."""
    if not peak_frequency > 0:
        raise InvalidArgument(f"peak frequency must be positive, got {peak_frequency}")
    if delay is None:
        delay = 1.5 / peak_frequency
    if delay < 0:
        raise InvalidArgument(f"delay must be non-negative, got {delay}")
    arg = (math.pi * peak_frequency * (time.times - delay)) ** 2
    samples = (1.0 - 2.0 * arg) * np.exp(-arg)
    return Wavelet(_unit_peak(samples), float(peak_frequency), float(delay), time)


def bandpass_ricker(low: float, high: float, time: TimeAxis, delay: float | None = None,
                    order: int = 4) -> Wavelet:
    """Ricker at the band centre passed through a zero-phase Butterworth band-pass."""
    if not 0 < low < high:
        raise InvalidArgument(f"need 0 < low < high, got low={low}, high={high}")
    nyquist = 0.5 / time.dt
    if high >= nyquist:
        raise InvalidArgument(f"band edge {high} Hz is at or above Nyquist {nyquist} Hz")
    centre = 0.5 * (low + high)
    if delay is None:
        # filter ringing before the main lobe must stay inside the record
        delay = 1.5 / low
    base = ricker(centre, time, delay)
    sos = signal.butter(order, [low, high], btype="bandpass", fs=1.0 / time.dt, output="sos")
    filtered = signal.sosfiltfilt(sos, base.samples)
    return Wavelet(_unit_peak(filtered), centre, float(delay), time)


def cfl_max_dt(model: SlownessSquaredModel, safety: float = 0.9) -> float:
    """Largest stable step of the 5-point leapfrog scheme, with a safety factor."""
    g = model.grid
    return safety * min(g.dx, g.dz) / (model.v_max * math.sqrt(2.0))


@dataclass(frozen=True)
class CamembertSpec:
    width: float = 4800.0
    depth: float = 6000.0
    spacing: float = 35.5
    background: float = 4000.0
    anomaly: float = 4600.0
    radius: float = 1000.0
    centre: Position | None = None


def build_camembert(spec: CamembertSpec = CamembertSpec()) -> SlownessSquaredModel:
    """Homogeneous background with a circular inclusion.

    The node count is snapped to ``round(extent / spacing) + 1``; the
    snapped extent is kept in ``metadata``.
    """
    if spec.spacing <= 0 or spec.width <= 0 or spec.depth <= 0:
        raise InvalidArgument("camembert extent and spacing must be positive")
    if spec.radius < 0:
        raise InvalidArgument("radius must be non-negative")
    nx = int(round(spec.width / spec.spacing)) + 1
    nz = int(round(spec.depth / spec.spacing)) + 1
    grid = Grid2D(nx, nz, spec.spacing, spec.spacing)
    wx, wz = grid.extent
    cx, cz = spec.centre if spec.centre is not None else (0.5 * wx, 0.5 * wz)
    if cx - spec.radius < 0 or cx + spec.radius > wx or cz - spec.radius < 0 or cz + spec.radius > wz:
        raise InvalidArgument("anomaly circle does not fit inside the grid")
    X, Z = np.meshgrid(grid.x, grid.z, indexing="ij")
    inside = (X - cx) ** 2 + (Z - cz) ** 2 <= spec.radius ** 2
    v = np.where(inside, spec.anomaly, spec.background)
    meta = {
        "builder": "camembert",
        "requested_extent": (spec.width, spec.depth),
        "snapped_extent": (wx, wz),
        "centre": (cx, cz),
        "radius": spec.radius,
    }
    return SlownessSquaredModel.from_velocity(grid, v, meta)


@dataclass(frozen=True)
class CheckerboardSpec:
    nx: int = 101
    nz: int = 101
    spacing: float = 20.0
    background: float = 1500.0
    perturbation: float = 2500.0
    tile: float = 200.0
    margin: float = 0.0


def build_checkerboard(spec: CheckerboardSpec = CheckerboardSpec()) -> SlownessSquaredModel:
    """Background with alternating fast tiles (tile velocity = background + perturbation).

    Tiles start at ``margin`` from every edge; cells in the margin keep the
    background velocity.
    """
    grid = Grid2D(spec.nx, spec.nz, spec.spacing, spec.spacing)
    ratio = spec.tile / spec.spacing
    if spec.tile <= 0 or abs(ratio - round(ratio)) > 1e-9:
        raise InvalidArgument(f"tile size {spec.tile} is not a multiple of spacing {spec.spacing}")
    mratio = spec.margin / spec.spacing
    if spec.margin < 0 or abs(mratio - round(mratio)) > 1e-9:
        raise InvalidArgument(f"margin {spec.margin} is not a multiple of spacing {spec.spacing}")
    n_tile, n_margin = int(round(ratio)), int(round(mratio))
    ix = np.arange(spec.nx) - n_margin
    iz = np.arange(spec.nz) - n_margin
    tx = np.floor_divide(ix, n_tile)[:, None]
    tz = np.floor_divide(iz, n_tile)[None, :]
    inside = (ix[:, None] >= 0) & (ix[:, None] < spec.nx - 2 * n_margin) \
        & (iz[None, :] >= 0) & (iz[None, :] < spec.nz - 2 * n_margin)
    fast = inside & ((tx + tz) % 2 == 1)
    v = spec.background + spec.perturbation * fast
    meta = {"builder": "checkerboard", "tile": spec.tile, "background": spec.background,
            "perturbation": spec.perturbation, "margin": spec.margin}
    return SlownessSquaredModel.from_velocity(grid, v, meta)


def line_positions(start: Position, stop: Position, n: int) -> list[Position]:
    if n < 1:
        raise InvalidArgument("need at least one position on a line")
    if n == 1:
        return [((start[0] + stop[0]) / 2, (start[1] + stop[1]) / 2)]
    xs = np.linspace(start[0], stop[0], n)
    zs = np.linspace(start[1], stop[1], n)
    return list(zip(xs.tolist(), zs.tolist()))


def perimeter_positions(grid: Grid2D, inset: float, n: int) -> list[Position]:
    """``n`` points equally spaced (by arc length) around the grid, ``inset`` metres inside."""
    if n < 1:
        raise InvalidArgument("need at least one perimeter position")
    wx, wz = grid.extent
    x0, z0 = grid.origin[0] + inset, grid.origin[1] + inset
    lx, lz = wx - 2 * inset, wz - 2 * inset
    if lx <= 0 or lz <= 0:
        raise InvalidArgument("perimeter inset leaves no room")
    total = 2 * (lx + lz)
    out = []
    for s in (np.arange(n) + 0.5) * total / n:
        if s < lx:
            out.append((x0 + s, z0))
        elif s < lx + lz:
            out.append((x0 + lx, z0 + s - lx))
        elif s < 2 * lx + lz:
            out.append((x0 + lx - (s - lx - lz), z0 + lz))
        else:
            out.append((x0, z0 + lz - (s - 2 * lx - lz)))
    return out


def perimeter_nodes(grid: Grid2D, inset_cells: int, n: int) -> list[Position]:
    """Like :func:`perimeter_positions` but de-duplicated on grid nodes."""
    inset = inset_cells * min(grid.dx, grid.dz)
    seen, out = set(), []
    for p in perimeter_positions(grid, inset, n):
        idx = grid.index_of(p)
        if idx not in seen:
            seen.add(idx)
            out.append(grid.position_of(idx))
    return out


def crosshole_acquisition(grid: Grid2D, n_sources: int, n_receivers: int,
                          offset_cells: int = 4) -> Acquisition:
    """Sources down the left side, receivers down the right side."""
    wx, wz = grid.extent
    ox, oz = grid.origin
    xo = offset_cells * grid.dx
    margin = offset_cells * grid.dz
    src = line_positions((ox + xo, oz + margin), (ox + xo, oz + wz - margin), n_sources)
    rec_idx = []
    for p in line_positions((ox + wx - xo, oz), (ox + wx - xo, oz + wz), n_receivers):
        idx = grid.index_of(p)
        if idx not in rec_idx:
            rec_idx.append(idx)
    return Acquisition(grid, src, [grid.position_of(i) for i in rec_idx])


def model_rmse(a: SlownessSquaredModel, b: SlownessSquaredModel) -> float:
    """RMS velocity difference in m/s."""
    if a.grid != b.grid:
        raise InvalidArgument("models live on different grids")
    return float(np.sqrt(np.mean((a.velocity - b.velocity) ** 2)))


def as_positions(points: Sequence[Sequence[float]]) -> list[Position]:
    return [(float(p[0]), float(p[1])) for p in points]
