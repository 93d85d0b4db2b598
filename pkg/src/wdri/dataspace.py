"""Receiver-space operators: G G^T, its explicit matrix Q and conjugate gradients.

``G = P A^-1`` maps a source field to receiver data, so ``G G^T`` acts on
data vectors of length ``nt * nr``: one adjoint solve followed by one
volumetric forward solve.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain import Acquisition, Position, ShotGather, SlownessSquaredModel, TimeAxis
from .errors import InvalidArgument
from .propagator import AbsorbingConfig, SolveCounter, WaveSolver

log = logging.getLogger(__name__)

MAX_DENSE_COLUMNS = 4096


@dataclass(frozen=True)
class DataVector:
    """Flattened (nt, nr) trace matrix, time-major with receivers fastest."""

    values: np.ndarray
    nt: int
    nr: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size != self.nt * self.nr:
            raise InvalidArgument(f"{v.size} values for nt={self.nt}, nr={self.nr}")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_gather(cls, gather: ShotGather) -> "DataVector":
        nt, nr = gather.traces.shape
        return cls(gather.traces.reshape(-1).copy(), nt, nr)

    def to_gather(self, time: TimeAxis, shot_id: int = 0, receivers=None) -> ShotGather:
        return ShotGather(shot_id, time, self.values.reshape(self.nt, self.nr).copy(), receivers)

    @property
    def traces(self) -> np.ndarray:
        return self.values.reshape(self.nt, self.nr)


class GGtOperator:
    """Matrix-free ``v -> P A^-1 A^-T P^T v`` for one model and receiver spread."""

    def __init__(self, model: SlownessSquaredModel, acquisition: Acquisition, time: TimeAxis,
                 absorbing: AbsorbingConfig | None = None, counter: SolveCounter | None = None):
        self.solver = WaveSolver(model, time, absorbing, counter)
        self.acquisition = acquisition
        self.time = time
        self.size = time.nt * acquisition.nr
        self.applications = 0

    def apply_traces(self, traces: np.ndarray) -> np.ndarray:
        self.applications += 1
        w = self.solver.adjoint(traces, self.acquisition)
        _, q = self.solver.forward_volumetric(w, self.acquisition, "none")
        return q.traces

    def __call__(self, v: np.ndarray) -> np.ndarray:
        nt, nr = self.time.nt, self.acquisition.nr
        return self.apply_traces(np.asarray(v, float).reshape(nt, nr)).reshape(-1)


def apply_GGt(model: SlownessSquaredModel, v: DataVector, acquisition: Acquisition,
              time: TimeAxis, absorbing: AbsorbingConfig | None = None,
              counter: SolveCounter | None = None) -> DataVector:
    if (v.nt, v.nr) != (time.nt, acquisition.nr):
        raise InvalidArgument("data vector shape inconsistent with acquisition/time")
    op = GGtOperator(model, acquisition, time, absorbing, counter)
    return DataVector(op(v.values), v.nt, v.nr)


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    history: list[float] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "converged" if self.converged else "not-converged"


def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray, tol: float = 1e-8,
                       maxiter: int = 200, x0: np.ndarray | None = None) -> CGResult:
    """CG for a symmetric positive-definite operator; stops at ``|r| <= tol * |b|``."""
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), True, 0, 0.0, [0.0])
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = float(r @ r)
    history = [math.sqrt(rr) / bnorm]
    it = 0
    while history[-1] > tol and it < maxiter:
        ap = apply(p)
        pap = float(p @ ap)
        if pap <= 0:
            log.warning("CG met a non-positive curvature direction at iteration %d", it)
            break
        a = rr / pap
        x += a * p
        r -= a * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        history.append(math.sqrt(rr) / bnorm)
    converged = history[-1] <= tol
    if not converged:
        log.warning("CG stopped after %d iterations at relative residual %.3g", it, history[-1])
    return CGResult(x, converged, it, history[-1], history)


def estimate_lambda_max(apply: Callable[[np.ndarray], np.ndarray], size: int, iterations: int = 20,
                        seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of a PSD operator."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(size)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iterations):
        y = apply(x)
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
    return lam


def solve_data_system(op: GGtOperator, rhs: np.ndarray, mu: float, tol: float = 1e-8,
                      maxiter: int = 200) -> CGResult:
    """Solve ``(G G^T + mu I) x = rhs`` by CG."""
    if not mu > 0:
        raise InvalidArgument("mu must be positive")
    return conjugate_gradient(lambda v: op(v) + mu * v, np.asarray(rhs, float).reshape(-1), tol, maxiter)


@dataclass
class QMatrix:
    values: np.ndarray
    nt: int
    nr: int
    asymmetry: float
    dt: float

    def block(self, i: int, j: int) -> np.ndarray:
        """Receiver-pair block, indexed [t, tau] for receiver i (rows) and j (columns)."""
        return self.values[i::self.nr, j::self.nr]


def assemble_Q_explicit(model: SlownessSquaredModel, acquisition: Acquisition, time: TimeAxis,
                        absorbing: AbsorbingConfig | None = None, counter: SolveCounter | None = None,
                        max_columns: int = MAX_DENSE_COLUMNS) -> QMatrix:
    """Dense ``P A^-1 A^-T P^T`` by applying the operator to unit vectors."""
    size = time.nt * acquisition.nr
    if size > max_columns:
        raise InvalidArgument(f"Q would have {size} columns, more than the limit {max_columns}")
    op = GGtOperator(model, acquisition, time, absorbing, counter)
    Q = np.empty((size, size))
    e = np.zeros(size)
    for j in range(size):
        e[j] = 1.0
        Q[:, j] = op(e)
        e[j] = 0.0
    scale = float(np.abs(Q).max()) or 1.0
    asym = float(np.abs(Q - Q.T).max()) / scale
    return QMatrix(0.5 * (Q + Q.T), time.nt, acquisition.nr, asym, time.dt)


def band_bound(xi: Position, xj: Position, c: float) -> float:
    """Largest diagonal shift ``|xi - xj| / c`` of a receiver-pair block."""
    if not c > 0:
        raise InvalidArgument("velocity must be positive")
    return math.hypot(xi[0] - xj[0], xi[1] - xj[1]) / c


@dataclass
class BlockBand:
    i: int
    j: int
    max_shift: float
    band: float
    outside_fraction: float
    passed: bool


@dataclass
class BandReport:
    blocks: list[BlockBand]
    threshold: float
    velocity: float

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    @property
    def worst(self) -> float:
        return max(b.outside_fraction for b in self.blocks)


def verify_band_structure(Q: QMatrix, acquisition: Acquisition, c: float, wavelet_halfwidth: float = 0.0,
                          threshold: float = 0.01) -> BandReport:
    """Fraction of each block's energy outside ``|t - tau| <= shift + halfwidth + 2 dt``."""
    pos = acquisition.receiver_coordinates()
    lag = np.abs(np.subtract.outer(np.arange(Q.nt), np.arange(Q.nt))) * Q.dt
    blocks = []
    for i in range(Q.nr):
        for j in range(Q.nr):
            shift = band_bound(tuple(pos[i]), tuple(pos[j]), c)
            band = shift + wavelet_halfwidth + 2 * Q.dt
            blk = Q.block(i, j)
            energy = float(np.sum(blk * blk))
            outside = float(np.sum((blk * blk)[lag > band + 1e-12 * Q.dt])) / energy if energy > 0 else 0.0
            blocks.append(BlockBand(i, j, shift, band, outside, outside < threshold))
    return BandReport(blocks, threshold, c)


@dataclass
class NormIdentity:
    lhs: float
    rhs: float
    gap: float
    cg: CGResult


def verify_norm_identity(model: SlownessSquaredModel, r: DataVector, acquisition: Acquisition,
                         time: TimeAxis, mu: float, tol: float = 1e-10, maxiter: int = 500,
                         absorbing: AbsorbingConfig | None = None) -> NormIdentity:
    """Compare ``|dd_e|^2_Q / (2 mu)`` with ``(mu/2) |r|^2_{Q^-1}``, ``Q = G G^T + mu I``.

    ``dd_e`` is taken as the data residual of the extended wavefield,
    ``r - G G^T Q^-1 r``; it equals ``mu Q^-1 r`` only when the solve is
    exact, so the gap measures the accuracy of the data-space solve.
    """
    op = GGtOperator(model, acquisition, time, absorbing)
    res = solve_data_system(op, r.values, mu, tol, maxiter)
    x = res.x  # Q^-1 r
    dde = r.values - op(x)
    lhs = float(dde @ (op(dde) + mu * dde)) / (2 * mu)
    rhs = 0.5 * mu * float(r.values @ x)
    denom = max(abs(lhs), abs(rhs))
    gap = abs(lhs - rhs) / denom if denom > 0 else 0.0
    return NormIdentity(lhs, rhs, gap, res)
