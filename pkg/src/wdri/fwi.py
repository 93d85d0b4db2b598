"""Reduced full-waveform inversion with an adjoint-state gradient.

Misfit is ``J(m) = 0.5 * sum_shots sum_t |d - P u(m)|^2 dt``.  The gradient
``dJ/dm = sum_shots sum_t u_tt * v dt`` with ``v`` the adjoint field of the
residual ``d - P u`` is exact for the discrete scheme on the physical grid.
"""
from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .domain import ShotGather, SlownessSquaredModel, model_rmse
from .errors import DegenerateInput, InvalidArgument
from .propagator import SolveCounter, WaveSolver, second_time_derivative
from .survey import Survey, clip_velocity, data_misfit, map_shots, source_receiver_mask, velocity_ceiling

log = logging.getLogger(__name__)


@dataclass
class FwiConfig:
    max_iterations: int = 50
    shrink: float = 0.5
    armijo: float = 1e-4
    max_trials: int = 10
    direction: str = "pseudo-hessian"
    mask_halo: int = 2
    tolerance: float = 0.0
    step_fraction: float = 0.01
    epsilon: float = 1e-3
    vmin: float = 1000.0
    vmax: float = 6000.0
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise InvalidArgument("shrink factor must lie in (0, 1)")
        if self.armijo <= 0 or self.max_trials < 1 or self.step_fraction <= 0 or self.epsilon <= 0:
            raise InvalidArgument("line-search constants must be positive")
        if self.direction not in ("steepest", "pseudo-hessian"):
            raise InvalidArgument(f"unknown direction mode {self.direction!r}")
        if not 0 < self.vmin < self.vmax:
            raise InvalidArgument("need 0 < vmin < vmax")


@dataclass
class IterationRecord:
    iteration: int
    misfit: float
    normalized_misfit: float
    wave_solves: int
    wall_time: float
    model_rmse: float | None = None
    step: float | None = None


@dataclass
class InversionState:
    model: SlownessSquaredModel
    counter: SolveCounter = field(default_factory=SolveCounter)
    iteration: int = 0
    history: list[IterationRecord] = field(default_factory=list)
    status: str = "running"
    initial_misfit: float | None = None
    final: IterationRecord | None = None
    dual: object = None

    @property
    def misfits(self) -> list[float]:
        return [r.misfit for r in self.history]


@dataclass
class FwiEvaluation:
    misfit: float
    gradient: np.ndarray
    illumination: np.ndarray
    residuals: list[ShotGather]


def residual(model: SlownessSquaredModel, survey: Survey, shot: int,
             counter: SolveCounter | None = None) -> ShotGather:
    """``d - P A(m)^-1 b`` for one shot (one forward solve)."""
    solver = survey.solver(model, counter)
    _, pred = solver.forward(survey.wavelet, survey.acquisition.sources[shot], survey.acquisition,
                             "none", shot_id=shot)
    obs = survey.observed[shot]
    return obs.with_traces(obs.traces - pred.traces)


def misfit(model: SlownessSquaredModel, survey: Survey, counter: SolveCounter | None = None,
           threads: int = 1) -> float:
    dt = survey.time.dt
    parts = map_shots(lambda s: data_misfit(residual(model, survey, s, counter).traces, dt),
                      survey.n_shots, threads)
    return float(sum(parts))


def _shot_gradient(solver: WaveSolver, survey: Survey, shot: int):
    acq = survey.acquisition
    movie, pred = solver.forward(survey.wavelet, acq.sources[shot], acq, "full", shot_id=shot)
    obs = survey.observed[shot]
    res = obs.with_traces(obs.traces - pred.traces)
    u_tt = second_time_derivative(movie).frames
    dt = survey.time.dt
    grad = np.zeros(acq.grid.shape)

    def accumulate(n, v):
        np.add(grad, u_tt[n] * v, out=grad)
    solver.adjoint(res, acq, on_frame=accumulate, store=False)
    illum = np.einsum("tij,tij->ij", u_tt, u_tt) * dt
    return data_misfit(res.traces, dt), grad * dt, illum, res


def evaluate(model: SlownessSquaredModel, survey: Survey, counter: SolveCounter | None = None,
             threads: int = 1) -> FwiEvaluation:
    """Misfit, gradient and pseudo-Hessian diagonal summed over shots in shot order."""
    solver = survey.solver(model, counter)
    parts = map_shots(lambda s: _shot_gradient(solver, survey, s), survey.n_shots, threads)
    total = 0.0
    grad = np.zeros(model.grid.shape)
    illum = np.zeros(model.grid.shape)
    for f, g, h, _ in parts:
        total += f
        grad += g
        illum += h
    return FwiEvaluation(total, grad, illum, [p[3] for p in parts])


def gradient(model: SlownessSquaredModel, survey: Survey, counter: SolveCounter | None = None,
             threads: int = 1) -> np.ndarray:
    return evaluate(model, survey, counter, threads).gradient


def descent_direction(grad: np.ndarray, illum: np.ndarray, epsilon: float = 1e-3) -> np.ndarray:
    """Pseudo-Hessian scaled direction ``-g / (H + eps * max(H))``."""
    if grad.shape != illum.shape:
        raise InvalidArgument("gradient and illumination shapes differ")
    if epsilon <= 0:
        raise InvalidArgument("epsilon must be positive")
    hmax = float(np.max(illum))
    if not hmax > 0:
        raise DegenerateInput("illumination is zero everywhere")
    return -grad / (illum + epsilon * hmax)


def initial_step(model: SlownessSquaredModel, direction: np.ndarray, config: FwiConfig) -> float:
    """Step giving a maximum velocity change of ``step_fraction * (vmax - vmin)``."""
    dv_dm = 0.5 * model.m ** -1.5
    peak = float(np.max(np.abs(direction) * dv_dm))
    if peak == 0:
        return 0.0
    return config.step_fraction * (config.vmax - config.vmin) / peak


def fwi_invert(config: FwiConfig, survey: Survey, initial: SlownessSquaredModel,
               truth: SlownessSquaredModel | None = None, callback=None) -> InversionState:
    """Descent with backtracking (Armijo) line search; misfit is non-increasing."""
    state = InversionState(initial)
    counter = state.counter
    mask = source_receiver_mask(survey.acquisition, config.mask_halo)
    vmax = velocity_ceiling(survey, config.vmax)
    model = clip_velocity(initial, initial.m, config.vmin, vmax)
    ev = evaluate(model, survey, counter, config.threads)
    state.initial_misfit = ev.misfit
    t0 = _time.perf_counter()
    solves0 = counter.total
    for it in range(config.max_iterations):
        rmse = model_rmse(model, truth) if truth is not None else None
        if ev.misfit <= survey.misfit_floor:
            state.status = "converged"
            break
        g = ev.gradient * mask
        if config.direction == "steepest":
            direction = -g
        else:
            direction = descent_direction(g, ev.illumination, config.epsilon)
        alpha = initial_step(model, direction, config)
        accepted = None
        for _ in range(config.max_trials):
            trial = clip_velocity(model, model.m + alpha * direction, config.vmin, vmax)
            slope = float(np.sum(ev.gradient * (trial.m - model.m)))
            if slope < 0:
                f_trial = misfit(trial, survey, counter, config.threads)
                if f_trial <= ev.misfit + config.armijo * slope:
                    accepted = trial
                    break
            alpha *= config.shrink
        now = _time.perf_counter()
        state.history.append(IterationRecord(it, ev.misfit, ev.misfit / state.initial_misfit,
                                             counter.total - solves0, now - t0, rmse,
                                             alpha if accepted is not None else 0.0))
        solves0 = counter.total
        t0 = now
        if callback is not None:
            callback(state)
        if accepted is None:
            log.info("line search stalled at iteration %d", it)
            state.status = "stall"
            break
        prev = ev.misfit
        model = accepted
        state.model = model
        state.iteration = it + 1
        ev = evaluate(model, survey, counter, config.threads)
        if config.tolerance > 0 and (prev - ev.misfit) / prev < config.tolerance:
            state.status = "converged"
            break
    else:
        state.status = "max_iterations"
    state.model = model
    rmse = model_rmse(model, truth) if truth is not None else None
    state.final = IterationRecord(state.iteration, ev.misfit,
                                  ev.misfit / state.initial_misfit if state.initial_misfit else 0.0,
                                  counter.total - solves0, _time.perf_counter() - t0, rmse)
    return state
