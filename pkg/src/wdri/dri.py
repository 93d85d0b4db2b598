"""Data reconstruction inversion (DRI).

Each iteration reconstructs the extended wavefield ``u_e`` from data-space
quantities only and updates the model with the imaging condition

    dm = - sum_s int u_e_tt * v_e dt / sum_s int |u_e_tt|^2 dt

where ``v_e`` back-propagates the dual accumulator plus the current residual.
Two variants:

* ``gradient-descent``: the data update is ``alpha * r`` with ``alpha`` from a
  one-dimensional least-squares fit; 2 forward + 2 backward solves per shot.
* ``exact``: the data update ``(G G^T + mu I)^-1 r`` is solved by CG.
"""
from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .dataspace import GGtOperator, solve_data_system
from .domain import ShotGather, SlownessSquaredModel, model_rmse
from .errors import ConsistencyError, InvalidArgument, ZeroDirection
from .fwi import InversionState, IterationRecord
from .propagator import SolveCounter, WaveSolver, second_derivative_frame
from .survey import Survey, clip_velocity, data_misfit, map_shots, source_receiver_mask, velocity_ceiling

log = logging.getLogger(__name__)

VARIANTS = ("gradient-descent", "exact")


@dataclass
class DriConfig:
    max_iterations: int = 50
    variant: str = "gradient-descent"
    mu: float | None = None
    cg_tolerance: float = 1e-6
    cg_max_iterations: int = 50
    storage_mode: str = "full"
    tolerance: float = 0.0
    epsilon: float = 1e-3
    vmin: float = 1000.0
    vmax: float = 6000.0
    mask_halo: int = 2
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"unknown DRI variant {self.variant!r}")
        if self.variant == "exact" and not (self.mu is not None and self.mu > 0):
            raise InvalidArgument("the exact variant needs mu > 0")
        if self.storage_mode not in ("full", "boundary"):
            raise InvalidArgument(f"storage mode must be full or boundary, got {self.storage_mode!r}")
        if self.cg_tolerance <= 0 or self.cg_max_iterations < 1 or self.tolerance < 0 or self.epsilon < 0:
            raise InvalidArgument("tolerances must be positive")
        if self.max_iterations < 0:
            raise InvalidArgument("max_iterations must be non-negative")
        if not 0 < self.vmin < self.vmax:
            raise InvalidArgument("need 0 < vmin < vmax")


@dataclass
class DualState:
    """Per-shot data-space accumulator ``y`` and the step lengths used so far."""

    y: list[np.ndarray]
    alphas: list[list[float]] = field(default_factory=list)

    @classmethod
    def zeros(cls, survey: Survey) -> "DualState":
        return cls([np.zeros_like(g.traces) for g in survey.observed])

    def gathers(self, survey: Survey) -> list[ShotGather]:
        return [g.with_traces(y.copy()) for g, y in zip(survey.observed, self.y)]


@dataclass
class DriStep:
    model: SlownessSquaredModel
    update: np.ndarray
    misfit: float
    alphas: list[float]
    residuals: list[np.ndarray]
    wave_solves: int
    skipped: list[int]
    cg_iterations: list[int] = field(default_factory=list)


def step_length(q: np.ndarray | ShotGather, r: np.ndarray | ShotGather) -> float:
    """``alpha = <q, r> / <q, q>``, the minimiser of ``|alpha q - r|``."""
    q = q.traces if isinstance(q, ShotGather) else np.asarray(q, float)
    r = r.traces if isinstance(r, ShotGather) else np.asarray(r, float)
    if q.shape != r.shape:
        raise InvalidArgument(f"shape mismatch {q.shape} vs {r.shape}")
    qq = float(np.vdot(q, q))
    if qq == 0.0:
        raise ZeroDirection("q is zero")
    return float(np.vdot(q, r)) / qq


class _ReverseFrames:
    """Frames of ``u_e = a + alpha * b`` pulled from two reverse-time streams.

    Keeps at most the three frames needed for a central second difference.
    """

    def __init__(self, a: Iterator, b: Iterator | None, alpha: float):
        self.a, self.b, self.alpha = a, b, alpha
        self.cache: dict[int, np.ndarray] = {}

    def _pull(self):
        n, fa = next(self.a)
        if self.b is not None:
            nb, fb = next(self.b)
            if nb != n:
                raise ConsistencyError("reverse streams out of step")
            fa = fa + self.alpha * fb
        self.cache[n] = fa

    def get(self, n: int) -> np.ndarray:
        while n not in self.cache:
            self._pull()
        for key in [k for k in self.cache if k > n + 1]:
            del self.cache[key]
        return self.cache[n]


def _movie_stream(frames: np.ndarray) -> Iterator:
    return ((n, frames[n]) for n in range(frames.shape[0] - 1, -1, -1))


def _image(solver: WaveSolver, survey: Survey, frames: _ReverseFrames, adjoint_source: np.ndarray):
    """Back-propagate ``adjoint_source`` and correlate with ``u_e_tt`` on the fly."""
    acq = survey.acquisition
    nt, dt = survey.time.nt, survey.time.dt
    num = np.zeros(acq.grid.shape)
    den = np.zeros(acq.grid.shape)

    def accumulate(n, v):
        cur = frames.get(n)
        nxt = frames.get(n + 1) if n < nt - 1 else None
        prev = frames.get(n - 1) if n > 0 else None
        utt = second_derivative_frame(prev, cur, nxt, dt)
        np.add(num, utt * v, out=num)
        np.add(den, utt * utt, out=den)
    solver.adjoint(adjoint_source, acq, on_frame=accumulate, store=False)
    return num * dt, den * dt


def _forward_streams(solver, survey, shot, storage):
    acq = survey.acquisition
    store, pred = solver.forward(survey.wavelet, acq.sources[shot], acq, storage, shot_id=shot)
    r = survey.observed[shot].traces - pred.traces

    def stream():
        if storage == "full":
            return _movie_stream(store.frames)
        return solver.reconstruct_forward(survey.wavelet, acq.sources[shot], store)
    return r, stream


def _volumetric_stream(solver, acq, w, storage):
    store, q = solver.forward_volumetric(w, acq, storage)
    if storage == "full":
        return q.traces, _movie_stream(store.frames)
    return q.traces, solver.reconstruct_volumetric(w, store)


def _gd_shot(solver: WaveSolver, survey: Survey, shot: int, y: np.ndarray, storage: str):
    acq = survey.acquisition
    dt = survey.time.dt
    r, stream_r = _forward_streams(solver, survey, shot, storage)
    misfit = data_misfit(r, dt)
    w = solver.adjoint(r, acq)
    q, stream_du = _volumetric_stream(solver, acq, w, storage)
    y_new = y + r
    try:
        alpha = step_length(q, r)
    except ZeroDirection:
        log.info("shot %d: zero search direction, skipped", shot)
        zero = np.zeros(acq.grid.shape)
        return zero, zero, 0.0, y_new, misfit, r, True
    frames = _ReverseFrames(stream_r(), stream_du, alpha)
    num, den = _image(solver, survey, frames, alpha * (y_new + r))
    return num, den, alpha, y_new, misfit, r, False


def dri_exact_data_update(op: GGtOperator, r: np.ndarray, mu: float, tol: float = 1e-6,
                          maxiter: int = 50):
    """``dy = (G G^T + mu I)^-1 r`` by matrix-free CG; returns (dy, CG result)."""
    r = np.asarray(r, float)
    res = solve_data_system(op, r.reshape(-1), mu, tol, maxiter)
    return res.x.reshape(r.shape), res


def _exact_shot(solver: WaveSolver, survey: Survey, shot: int, y: np.ndarray, config: DriConfig,
                counter: SolveCounter | None):
    acq = survey.acquisition
    dt = survey.time.dt
    r, stream_r = _forward_streams(solver, survey, shot, config.storage_mode)
    misfit = data_misfit(r, dt)
    op = GGtOperator(solver.model, acq, survey.time, survey.absorbing, counter)
    dy, cg = dri_exact_data_update(op, r, config.mu, config.cg_tolerance, config.cg_max_iterations)
    y_new = y + dy
    if not np.any(dy):
        zero = np.zeros(acq.grid.shape)
        return zero, zero, 1.0, y_new, misfit, r, True, cg.iterations
    w = solver.adjoint(dy, acq)
    _, stream_du = _volumetric_stream(solver, acq, w, config.storage_mode)
    frames = _ReverseFrames(stream_r(), stream_du, 1.0)
    num, den = _image(solver, survey, frames, y_new + dy)
    return num, den, 1.0, y_new, misfit, r, False, cg.iterations


def model_update(num: np.ndarray, den: np.ndarray, epsilon: float) -> np.ndarray:
    """``-num / (den + epsilon * max(den))``, zero where nothing is illuminated."""
    scale = float(np.max(den)) if den.size else 0.0
    if scale <= 0:
        return np.zeros_like(num)
    stab = den + epsilon * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(stab > 0, -num / np.where(stab > 0, stab, 1.0), 0.0)
    return out


def dri_iteration(model: SlownessSquaredModel, dual: DualState, survey: Survey, config: DriConfig,
                  counter: SolveCounter | None = None, mask: np.ndarray | None = None,
                  vmax: float | None = None) -> DriStep:
    """One DRI iteration; ``dual`` is updated in place."""
    if len(dual.y) != survey.n_shots:
        raise InvalidArgument("dual state does not match the number of shots")
    counter = counter if counter is not None else SolveCounter()
    solver = survey.solver(model, counter)
    before = counter.total
    if config.variant == "gradient-descent":
        parts = map_shots(lambda s: _gd_shot(solver, survey, s, dual.y[s], config.storage_mode),
                          survey.n_shots, config.threads)
        cg_its = []
    else:
        parts = map_shots(lambda s: _exact_shot(solver, survey, s, dual.y[s], config, counter),
                          survey.n_shots, config.threads)
        cg_its = [p[7] for p in parts]
    solves = counter.total - before
    skipped = [s for s, p in enumerate(parts) if p[6]]
    if config.variant == "gradient-descent":
        expected = 4 * survey.n_shots - len(skipped)
        if solves != expected:
            raise ConsistencyError(f"{solves} wave solves, expected {expected}")
    num = np.zeros(model.grid.shape)
    den = np.zeros(model.grid.shape)
    for p in parts:
        num += p[0]
        den += p[1]
    dm = model_update(num, den, config.epsilon)
    if mask is not None:
        dm = dm * mask
    for s, p in enumerate(parts):
        dual.y[s] = p[3]
    alphas = [p[2] for p in parts]
    dual.alphas.append(alphas)
    new = model if not np.any(dm) else clip_velocity(model, model.m + dm, config.vmin,
                                                     vmax if vmax is not None else config.vmax)
    return DriStep(new, new.m - model.m, float(sum(p[4] for p in parts)), alphas,
                   [p[5] for p in parts], solves, skipped, cg_its)


def _misfit(model, survey, counter, threads):
    solver = survey.solver(model, counter)

    def shot(s):
        _, pred = solver.forward(survey.wavelet, survey.acquisition.sources[s], survey.acquisition, "none")
        return data_misfit(survey.observed[s].traces - pred.traces, survey.time.dt)
    return float(sum(map_shots(shot, survey.n_shots, threads)))


def dri_invert(config: DriConfig, survey: Survey, initial: SlownessSquaredModel,
               truth: SlownessSquaredModel | None = None, callback=None) -> InversionState:
    """Run DRI iterations; history holds the misfit of the model entering each iteration."""
    state = InversionState(initial)
    counter = state.counter
    dual = DualState.zeros(survey)
    state.dual = dual
    mask = source_receiver_mask(survey.acquisition, config.mask_halo)
    vmax = velocity_ceiling(survey, config.vmax)
    model = clip_velocity(initial, initial.m, config.vmin, vmax)
    state.model = model
    t0 = _time.perf_counter()
    misfit = None
    for it in range(config.max_iterations):
        step = dri_iteration(model, dual, survey, config, counter, mask, vmax)
        misfit = step.misfit
        if state.initial_misfit is None:
            state.initial_misfit = misfit
        now = _time.perf_counter()
        norm = misfit / state.initial_misfit if state.initial_misfit else 0.0
        rmse = model_rmse(model, truth) if truth is not None else None
        state.history.append(IterationRecord(it, misfit, norm, step.wave_solves, now - t0, rmse))
        t0 = now
        if callback is not None:
            callback(state)
        if misfit <= survey.misfit_floor:
            state.status = "converged"
            break
        if config.tolerance > 0 and norm < config.tolerance:
            state.status = "converged"
            break
        model = step.model
        state.model = model
        state.iteration = it + 1
    else:
        state.status = "max_iterations"
    before = counter.total
    if state.status == "converged":
        final_misfit = misfit
    else:
        final_misfit = _misfit(model, survey, counter, config.threads)
    if state.initial_misfit is None:
        state.initial_misfit = final_misfit
    rmse = model_rmse(model, truth) if truth is not None else None
    state.final = IterationRecord(state.iteration, final_misfit,
                                  final_misfit / state.initial_misfit if state.initial_misfit else 0.0,
                                  counter.total - before, _time.perf_counter() - t0, rmse)
    return state
