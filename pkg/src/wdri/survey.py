"""Observed-data bundle and shot-parallel helpers shared by the inversions."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, TypeVar

import numpy as np

from .domain import Acquisition, ShotGather, SlownessSquaredModel, Wavelet
from .errors import InvalidArgument
from .propagator import AbsorbingConfig, SolveCounter, WaveSolver

T = TypeVar("T")


@dataclass(frozen=True)
class Survey:
    """Geometry, source wavelet and one observed gather per source."""

    acquisition: Acquisition
    wavelet: Wavelet
    observed: tuple[ShotGather, ...]
    absorbing: AbsorbingConfig = field(default_factory=AbsorbingConfig)
    misfit_floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "observed", tuple(self.observed))
        if len(self.observed) != self.acquisition.n_shots:
            raise InvalidArgument(f"{len(self.observed)} gathers for {self.acquisition.n_shots} sources")
        for g in self.observed:
            if g.time != self.wavelet.time or g.nr != self.acquisition.nr:
                raise InvalidArgument(f"gather {g.shot_id} inconsistent with wavelet/acquisition")

    @property
    def time(self):
        return self.wavelet.time

    @property
    def n_shots(self) -> int:
        return self.acquisition.n_shots

    def subset(self, shots) -> "Survey":
        acq = Acquisition(self.acquisition.grid, [self.acquisition.sources[i] for i in shots],
                          self.acquisition.receivers)
        return Survey(acq, self.wavelet, [self.observed[i] for i in shots], self.absorbing,
                      self.misfit_floor)

    def solver(self, model: SlownessSquaredModel, counter: SolveCounter | None = None) -> WaveSolver:
        return WaveSolver(model, self.time, self.absorbing, counter)


def simulate(model: SlownessSquaredModel, acquisition: Acquisition, wavelet: Wavelet,
             absorbing: AbsorbingConfig | None = None, counter: SolveCounter | None = None,
             threads: int = 1) -> Survey:
    """Synthetic data for every source of ``acquisition``."""
    absorbing = absorbing or AbsorbingConfig()
    solver = WaveSolver(model, wavelet.time, absorbing, counter)

    def shot(i):
        _, gather = solver.forward(wavelet, acquisition.sources[i], acquisition, "none", shot_id=i)
        return gather
    gathers = map_shots(shot, acquisition.n_shots, threads)
    return Survey(acquisition, wavelet, gathers, absorbing)


def map_shots(fn: Callable[[int], T], n_shots: int, threads: int = 1) -> list[T]:
    """Run ``fn`` for every shot; results come back in shot order."""
    if threads <= 1 or n_shots <= 1:
        return [fn(i) for i in range(n_shots)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_shots)))


def data_misfit(residual: np.ndarray, dt: float) -> float:
    """Half the time-integrated squared residual, ``0.5 * sum(r**2) * dt``."""
    return 0.5 * float(np.sum(residual * residual)) * dt


def source_receiver_mask(acquisition: Acquisition, halo: int) -> np.ndarray:
    """Boolean field, False within ``halo`` cells (Chebyshev) of any source or receiver."""
    grid = acquisition.grid
    mask = np.ones(grid.shape, dtype=bool)
    if halo < 0:
        return mask
    for ix, iz in np.vstack([acquisition.source_indices, acquisition.receiver_indices]):
        mask[max(ix - halo, 0): ix + halo + 1, max(iz - halo, 0): iz + halo + 1] = False
    return mask


def clip_velocity(model: SlownessSquaredModel, m: np.ndarray, vmin: float, vmax: float
                  ) -> SlownessSquaredModel:
    """New model with ``m`` clipped so that ``vmin <= v <= vmax``."""
    return model.with_m(np.clip(m, 1.0 / vmax ** 2, 1.0 / vmin ** 2))


def velocity_ceiling(survey: Survey, vmax: float, safety: float = 0.9) -> float:
    """Largest velocity allowed by both ``vmax`` and the time step's stability limit."""
    grid = survey.acquisition.grid
    v_cfl = safety * min(grid.dx, grid.dz) / (survey.time.dt * np.sqrt(2.0))
    return float(min(vmax, v_cfl * (1 - 1e-9)))


def quantization_floor(gathers, dt: float, unit_roundoff: float = 2.0 ** -24) -> float:
    """Largest misfit explained by rounding the observed traces to a lower precision.

    Rounding to nearest moves each sample by at most ``unit_roundoff * |d|``,
    so a model that generated the data exactly cannot score above this.
    """
    return sum(data_misfit(g.traces * unit_roundoff, dt) for g in gathers)
