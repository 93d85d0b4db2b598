"""Finite-difference solver for the constant-density acoustic wave equation.

The scheme solves ``m * u_tt - lap(u) = b`` with a second-order leapfrog in
time and the 5-point Laplacian in space, on the physical grid padded by a
sponge layer::

    u[n+1] = g * (2 u[n] + k * (lap u[n] + b[n]) - g * u[n-1]),   k = dt^2 / m

``g`` is a multiplicative taper that equals 1 on the physical grid.  The
recurrence defines a fixed linear map F: b -> u (the discrete A(m)^-1).
:meth:`WaveSolver.adjoint` evaluates the exact transpose of F by running the
transposed recurrence backward in time, so dot-product tests hold to
round-off.  Sources are confined to the physical grid, i.e. G = P F C^T with
C the restriction to the physical grid.
"""
from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numba
import numpy as np

from .domain import Acquisition, Grid2D, ShotGather, SlownessSquaredModel, TimeAxis, Wavelet
from .domain import Position, cfl_max_dt
from .errors import ConsistencyError, DivergenceError, InvalidArgument, StabilityError

EDGES = ("left", "right", "top", "bottom")
STORAGE_MODES = ("full", "boundary", "none")


@dataclass(frozen=True)
class AbsorbingConfig:
    """Sponge layer surrounding the physical grid.

    ``free_surface`` lists edges that get no layer; the zero Dirichlet
    condition of the stencil then acts as a pressure-free surface there.
    """

    layer_width: int = 20
    strength: float = 0.35
    free_surface: tuple[str, ...] = ()

    def __post_init__(self):
        if self.layer_width < 0:
            raise InvalidArgument("layer_width must be >= 0")
        if self.strength < 0:
            raise InvalidArgument("taper strength must be >= 0")
        bad = set(self.free_surface) - set(EDGES)
        if bad:
            raise InvalidArgument(f"unknown edges {sorted(bad)}")
        object.__setattr__(self, "free_surface", tuple(sorted(set(self.free_surface))))

    def widths(self) -> dict[str, int]:
        return {e: 0 if e in self.free_surface else self.layer_width for e in EDGES}

    def profile(self, width: int) -> np.ndarray:
        """Taper values for depths 1..width into a layer (outermost last)."""
        if width == 0:
            return np.zeros(0)
        d = np.arange(1, width + 1) / width
        return np.exp(-(self.strength * d) ** 2)


class SolveCounter:
    """Thread-safe tally of wave-equation solves."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forward = 0
        self.adjoint = 0
        self.volumetric = 0
        self.reconstructions = 0

    def add(self, kind: str):
        with self._lock:
            setattr(self, kind, getattr(self, kind) + 1)

    @property
    def total(self) -> int:
        return self.forward + self.adjoint + self.volumetric

    def snapshot(self) -> dict[str, int]:
        return {"forward": self.forward, "adjoint": self.adjoint,
                "volumetric": self.volumetric, "total": self.total}


@dataclass
class WavefieldMovie:
    """Space-time field on the physical grid, frames shaped (nt, nx, nz)."""

    grid: Grid2D
    time: TimeAxis
    frames: np.ndarray

    def __post_init__(self):
        if self.frames.shape != (self.time.nt, *self.grid.shape):
            raise InvalidArgument(
                f"movie frames {self.frames.shape} inconsistent with "
                f"({self.time.nt}, {self.grid.nx}, {self.grid.nz})")

    @classmethod
    def zeros(cls, grid: Grid2D, time: TimeAxis) -> "WavefieldMovie":
        return cls(grid, time, np.zeros((time.nt, *grid.shape)))

    def __add__(self, other: "WavefieldMovie") -> "WavefieldMovie":
        return WavefieldMovie(self.grid, self.time, self.frames + other.frames)

    def scaled(self, factor: float) -> "WavefieldMovie":
        return WavefieldMovie(self.grid, self.time, factor * self.frames)


VolumetricSource = WavefieldMovie


@dataclass
class BoundaryCheckpoint:
    """Outer ring of the physical grid at every step plus the last two frames."""

    time: TimeAxis
    left: np.ndarray
    right: np.ndarray
    top: np.ndarray
    bottom: np.ndarray
    last: np.ndarray
    before_last: np.ndarray
    fingerprint: str = ""

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.left, self.right, self.top, self.bottom,
                                      self.last, self.before_last))


# ---------------------------------------------------------------- kernels

@numba.njit(cache=True, nogil=True)
def _forward_step(up, uc, un, k, g, cx, cz):
    nx, nz = uc.shape
    acc = 0.0
    for i in range(1, nx - 1):
        for j in range(1, nz - 1):
            c = uc[i, j]
            lap = cx * (uc[i - 1, j] + uc[i + 1, j] - 2.0 * c) + cz * (uc[i, j - 1] + uc[i, j + 1] - 2.0 * c)
            gi = g[i, j]
            val = gi * (2.0 * c + k[i, j] * lap - gi * up[i, j])
            un[i, j] = val
            acc += abs(val)
    return acc


@numba.njit(cache=True, nogil=True)
def _adjoint_step(l2, l1, l0, v, k, g, cx, cz):
    # v = k g lam[n+1];  lam[n] = 2 g lam[n+1] + lap(v) - g^2 lam[n+2]
    nx, nz = l1.shape
    for i in range(1, nx - 1):
        for j in range(1, nz - 1):
            v[i, j] = k[i, j] * g[i, j] * l1[i, j]
    acc = 0.0
    for i in range(1, nx - 1):
        for j in range(1, nz - 1):
            c = v[i, j]
            lap = cx * (v[i - 1, j] + v[i + 1, j] - 2.0 * c) + cz * (v[i, j - 1] + v[i, j + 1] - 2.0 * c)
            gi = g[i, j]
            val = 2.0 * gi * l1[i, j] + lap - gi * gi * l2[i, j]
            l0[i, j] = val
            acc += abs(val)
    return acc


@numba.njit(cache=True, nogil=True)
def _reverse_step(un1, un, out, k, cx, cz):
    # u[n-1] = 2 u[n] + k lap u[n] - u[n+1] on cells off the outer ring (g == 1 there)
    nx, nz = un.shape
    for i in range(1, nx - 1):
        for j in range(1, nz - 1):
            c = un[i, j]
            lap = cx * (un[i - 1, j] + un[i + 1, j] - 2.0 * c) + cz * (un[i, j - 1] + un[i, j + 1] - 2.0 * c)
            out[i, j] = 2.0 * c + k[i, j] * lap - un1[i, j]


@numba.njit(cache=True, nogil=True)
def _laplacian(u, out, cx, cz):
    nx, nz = u.shape
    for i in range(nx):
        for j in range(nz):
            c = u[i, j]
            s = -2.0 * (cx + cz) * c
            if i > 0:
                s += cx * u[i - 1, j]
            if i < nx - 1:
                s += cx * u[i + 1, j]
            if j > 0:
                s += cz * u[i, j - 1]
            if j < nz - 1:
                s += cz * u[i, j + 1]
            out[i, j] = s


def laplacian(field: np.ndarray, grid: Grid2D) -> np.ndarray:
    """5-point Laplacian with zero values outside the array."""
    f = np.ascontiguousarray(field, dtype=np.float64)
    out = np.empty_like(f)
    _laplacian(f, out, 1.0 / grid.dx ** 2, 1.0 / grid.dz ** 2)
    return out


# ---------------------------------------------------------------- solver

def _digest(*arrays, extra: str = "") -> str:
    h = hashlib.sha1(extra.encode())
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class WaveSolver:
    """Propagator bound to one model, time axis and boundary setup.

    Construction is cheap; the padded coefficient arrays are built once and
    shared read-only, so one solver may serve several shots concurrently.
    """

    def __init__(self, model: SlownessSquaredModel, time: TimeAxis,
                 absorbing: AbsorbingConfig | None = None,
                 counter: SolveCounter | None = None, check_cfl: bool = True):
        self.model = model
        self.grid = model.grid
        self.time = time
        self.absorbing = absorbing or AbsorbingConfig()
        self.counter = counter
        if check_cfl:
            dt_max = cfl_max_dt(model)
            if time.dt > dt_max:
                raise StabilityError(time.dt, dt_max)

        w = self.absorbing.widths()
        self._w = w
        nx, nz = self.grid.shape
        m_pad = np.pad(model.m, ((w["left"], w["right"]), (w["top"], w["bottom"])), mode="edge")
        taper = np.ones_like(m_pad)
        for edge in EDGES:
            prof = self.absorbing.profile(w[edge])
            if edge == "left" and w[edge]:
                taper[: w[edge], :] *= prof[::-1, None]
            elif edge == "right" and w[edge]:
                taper[-w[edge]:, :] *= prof[:, None]
            elif edge == "top" and w[edge]:
                taper[:, : w[edge]] *= prof[None, ::-1]
            elif edge == "bottom" and w[edge]:
                taper[:, -w[edge]:] *= prof[None, :]
        # one ghost ring of zeros realizes the Dirichlet condition
        self.k = np.pad(time.dt ** 2 / m_pad, 1)
        self.g = np.pad(taper, 1)
        self.gk = self.g * self.k
        self.shape = self.k.shape
        self.cx = 1.0 / self.grid.dx ** 2
        self.cz = 1.0 / self.grid.dz ** 2
        ox, oz = 1 + w["left"], 1 + w["top"]
        self.phys = (slice(ox, ox + nx), slice(oz, oz + nz))
        self._offset = (ox, oz)
        self.k_phys = np.ascontiguousarray(self.k[self.phys])
        self.model_digest = _digest(model.m, extra=f"{time}|{self.absorbing}|{self.grid}")

    # -- helpers
    def _padded_index(self, idx) -> tuple[int, int]:
        return idx[0] + self._offset[0], idx[1] + self._offset[1]

    def _receiver_index(self, acquisition: Acquisition):
        if acquisition.grid != self.grid:
            raise InvalidArgument("acquisition grid differs from model grid")
        ri = acquisition.receiver_indices
        return ri[:, 0] + self._offset[0], ri[:, 1] + self._offset[1]

    def _count(self, kind: str):
        if self.counter is not None:
            self.counter.add(kind)

    def point_source_samples(self, wavelet: Wavelet) -> np.ndarray:
        """Source density samples of a point source (wavelet / cell area)."""
        if wavelet.time != self.time:
            raise InvalidArgument("wavelet time axis differs from solver time axis")
        return wavelet.samples / (self.grid.dx * self.grid.dz)

    # -- forward
    def _forward(self, inject: Callable[[int, np.ndarray], None], rec, storage_mode: str,
                 fingerprint: str = ""):
        if storage_mode not in STORAGE_MODES:
            raise InvalidArgument(f"unknown storage mode {storage_mode!r}")
        nt = self.time.nt
        nx, nz = self.grid.shape
        up = np.zeros(self.shape)
        uc = np.zeros(self.shape)
        un = np.zeros(self.shape)
        traces = np.zeros((nt, len(rec[0])))
        frames = ring = None
        if storage_mode == "full":
            frames = np.zeros((nt, nx, nz))
        elif storage_mode == "boundary":
            ring = {"left": np.zeros((nt, nz)), "right": np.zeros((nt, nz)),
                    "top": np.zeros((nt, nx)), "bottom": np.zeros((nt, nx))}
        ph = self.phys
        for n in range(nt - 1):
            acc = _forward_step(up, uc, un, self.k, self.g, self.cx, self.cz)
            inject(n, un)
            if not math.isfinite(acc):
                raise DivergenceError(n + 1)
            traces[n + 1] = un[rec]
            if frames is not None:
                frames[n + 1] = un[ph]
            elif ring is not None:
                p = un[ph]
                ring["left"][n + 1] = p[0]
                ring["right"][n + 1] = p[-1]
                ring["top"][n + 1] = p[:, 0]
                ring["bottom"][n + 1] = p[:, -1]
            up, uc, un = uc, un, up
        if not np.all(np.isfinite(uc)):
            raise DivergenceError(nt - 1)
        if frames is not None:
            store = WavefieldMovie(self.grid, self.time, frames)
        elif ring is not None:
            store = BoundaryCheckpoint(self.time, ring["left"], ring["right"], ring["top"], ring["bottom"],
                                       uc[ph].copy(), up[ph].copy() if nt > 1 else np.zeros((nx, nz)),
                                       fingerprint)
        else:
            store = None
        return store, traces

    def _point_injector(self, wavelet: Wavelet, source_position: Position):
        samples = self.point_source_samples(wavelet)
        si = self._padded_index(self.grid.index_of(source_position))
        gk = self.gk[si]

        def inject(n, un):
            un[si] += gk * samples[n]
        return inject

    def source_fingerprint(self, wavelet: Wavelet, source_position: Position) -> str:
        return _digest(wavelet.samples, extra=f"{self.model_digest}|{self.grid.index_of(source_position)}")

    def forward(self, wavelet: Wavelet, source_position: Position, acquisition: Acquisition,
                storage_mode: str = "full", shot_id: int = 0):
        """Point-source solve; returns (movie | checkpoint | None, gather)."""
        rec = self._receiver_index(acquisition)
        inject = self._point_injector(wavelet, source_position)
        self._count("forward")
        store, traces = self._forward(inject, rec, storage_mode,
                                      self.source_fingerprint(wavelet, source_position))
        return store, ShotGather(shot_id, self.time, traces, acquisition.receiver_coordinates())

    def _volumetric_injector(self, source: WavefieldMovie):
        if source.frames.shape != (self.time.nt, *self.grid.shape):
            raise InvalidArgument("volumetric source shape does not match solver grid/time")
        gk = self.gk[self.phys]
        ph = self.phys
        frames = source.frames

        def inject(n, un):
            un[ph] += gk * frames[n]
        return inject

    def forward_volumetric(self, source: WavefieldMovie, acquisition: Acquisition,
                           storage_mode: str = "full", shot_id: int = 0):
        """Solve with a space-time right-hand side given on the physical grid."""
        rec = self._receiver_index(acquisition)
        inject = self._volumetric_injector(source)
        self._count("volumetric")
        fp = _digest(source.frames[:, ::7, ::7], extra=self.model_digest)
        store, traces = self._forward(inject, rec, storage_mode, fp)
        return store, ShotGather(shot_id, self.time, traces, acquisition.receiver_coordinates())

    # -- adjoint
    def adjoint(self, residual: ShotGather | np.ndarray, acquisition: Acquisition,
                on_frame: Callable[[int, np.ndarray], None] | None = None,
                store: bool = True) -> WavefieldMovie | None:
        """Apply C F^T P^T to receiver data by reverse time stepping.

        Frames are produced from the last time index down to 0.  With
        ``on_frame`` each physical-grid frame is handed over as soon as it is
        known; ``store=False`` then avoids keeping the movie.
        """
        traces = residual.traces if isinstance(residual, ShotGather) else np.asarray(residual, float)
        nt = self.time.nt
        if traces.shape != (nt, acquisition.nr):
            raise InvalidArgument(f"residual shape {traces.shape} does not match "
                                  f"(nt={nt}, nr={acquisition.nr})")
        rec = self._receiver_index(acquisition)
        self._count("adjoint")
        nx, nz = self.grid.shape
        l2 = np.zeros(self.shape)
        l1 = np.zeros(self.shape)
        l0 = np.zeros(self.shape)
        v = np.zeros(self.shape)
        frames = np.zeros((nt, nx, nz)) if store else None
        ph = self.phys
        for n in range(nt - 1, -1, -1):
            acc = _adjoint_step(l2, l1, l0, v, self.k, self.g, self.cx, self.cz)
            if not math.isfinite(acc):
                raise DivergenceError(n)
            l0[rec] += traces[n]
            vp = v[ph]
            if frames is not None:
                frames[n] = vp
            if on_frame is not None:
                on_frame(n, vp)
            l2, l1, l0 = l1, l0, l2
        return WavefieldMovie(self.grid, self.time, frames) if store else None

    # -- checkpoint replay
    def _replay(self, checkpoint: BoundaryCheckpoint, add_source: Callable[[int, np.ndarray], None]
                ) -> Iterator[tuple[int, np.ndarray]]:
        nt = self.time.nt
        if checkpoint.time != self.time:
            raise ConsistencyError("checkpoint time axis differs from solver time axis")
        if self.counter is not None:
            self.counter.add("reconstructions")
        un1 = checkpoint.last.copy()
        yield nt - 1, un1
        if nt == 1:
            return
        un = checkpoint.before_last.copy()
        yield nt - 2, un
        for n in range(nt - 2, 0, -1):
            out = np.empty_like(un)
            _reverse_step(un1, un, out, self.k_phys, self.cx, self.cz)
            add_source(n, out)
            out[0] = checkpoint.left[n - 1]
            out[-1] = checkpoint.right[n - 1]
            out[:, 0] = checkpoint.top[n - 1]
            out[:, -1] = checkpoint.bottom[n - 1]
            yield n - 1, out
            un1, un = un, out

    def reconstruct_forward(self, wavelet: Wavelet, source_position: Position,
                            checkpoint: BoundaryCheckpoint) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(n, frame)`` of a point-source solve in reverse time order."""
        if checkpoint.fingerprint != self.source_fingerprint(wavelet, source_position):
            raise ConsistencyError("checkpoint was not produced by this model/source")
        samples = self.point_source_samples(wavelet)
        si, sj = self.grid.index_of(source_position)
        kf = self.k_phys[si, sj]

        def add_source(n, out):
            out[si, sj] += kf * samples[n]
        return self._replay(checkpoint, add_source)

    def reconstruct_volumetric(self, source: WavefieldMovie,
                               checkpoint: BoundaryCheckpoint) -> Iterator[tuple[int, np.ndarray]]:
        if checkpoint.fingerprint != _digest(source.frames[:, ::7, ::7], extra=self.model_digest):
            raise ConsistencyError("checkpoint was not produced by this model/source")
        k = self.k_phys
        frames = source.frames

        def add_source(n, out):
            out += k * frames[n]
        return self._replay(checkpoint, add_source)


# ---------------------------------------------------------------- module API

def forward(model: SlownessSquaredModel, wavelet: Wavelet, source_position: Position,
            acquisition: Acquisition, storage_mode: str = "full", *,
            absorbing: AbsorbingConfig | None = None, counter: SolveCounter | None = None,
            shot_id: int = 0):
    solver = WaveSolver(model, wavelet.time, absorbing, counter)
    return solver.forward(wavelet, source_position, acquisition, storage_mode, shot_id)


def forward_volumetric(model: SlownessSquaredModel, source: WavefieldMovie, acquisition: Acquisition,
                       storage_mode: str = "full", *, absorbing: AbsorbingConfig | None = None,
                       counter: SolveCounter | None = None, shot_id: int = 0):
    solver = WaveSolver(model, source.time, absorbing, counter)
    return solver.forward_volumetric(source, acquisition, storage_mode, shot_id)


def adjoint(model: SlownessSquaredModel, residual: ShotGather, acquisition: Acquisition, *,
            absorbing: AbsorbingConfig | None = None,
            counter: SolveCounter | None = None) -> WavefieldMovie:
    solver = WaveSolver(model, residual.time, absorbing, counter)
    return solver.adjoint(residual, acquisition)


def reconstruct_forward(model: SlownessSquaredModel, wavelet: Wavelet, source_position: Position,
                        checkpoint: BoundaryCheckpoint, *, absorbing: AbsorbingConfig | None = None):
    solver = WaveSolver(model, wavelet.time, absorbing)
    return solver.reconstruct_forward(wavelet, source_position, checkpoint)


def second_time_derivative(movie: WavefieldMovie) -> WavefieldMovie:
    """Central second difference in time.

    The first frame uses the zero state before t=0 (consistent with zero
    initial conditions); the last frame is set to zero.
    """
    u = movie.frames
    if u.shape[0] < 3:
        raise InvalidArgument("need at least 3 frames for a second time derivative")
    out = np.zeros_like(u)
    out[1:-1] = u[2:] - 2.0 * u[1:-1] + u[:-2]
    out[0] = u[1] - 2.0 * u[0]
    out /= movie.time.dt ** 2
    return WavefieldMovie(movie.grid, movie.time, out)


def second_derivative_frame(prev: np.ndarray | None, cur: np.ndarray, nxt: np.ndarray | None,
                            dt: float) -> np.ndarray:
    """Single-frame version of :func:`second_time_derivative` for streaming."""
    if nxt is None:
        return np.zeros_like(cur)
    if prev is None:
        return (nxt - 2.0 * cur) / dt ** 2
    return (nxt - 2.0 * cur + prev) / dt ** 2


def zero_lag_correlate(a: WavefieldMovie, b: WavefieldMovie) -> np.ndarray:
    """Per-cell sum over time of ``a * b * dt``."""
    if a.frames.shape != b.frames.shape:
        raise InvalidArgument(f"movie shapes differ: {a.frames.shape} vs {b.frames.shape}")
    return np.einsum("tij,tij->ij", a.frames, b.frames) * a.time.dt


def illumination(a: WavefieldMovie) -> np.ndarray:
    return zero_lag_correlate(a, a)
