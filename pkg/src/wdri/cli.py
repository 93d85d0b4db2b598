"""Command-line entry point: ``wdri <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical
precondition violated (unstable time step, divergence), 4 inversion stalled.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .dataspace import assemble_Q_explicit, verify_band_structure
from .dri import dri_invert
from .fwi import fwi_invert
from .domain import (Acquisition, CamembertSpec, CheckerboardSpec, Grid2D, TimeAxis, bandpass_ricker,
                     build_camembert, build_checkerboard, cfl_max_dt, ricker)
from .errors import ConfigError, DivergenceError, FormatError, InvalidArgument, StabilityError, WdriError
from .propagator import SolveCounter
from .survey import Survey, quantization_floor, simulate

log = logging.getLogger("wdri")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_STALL = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _model_spec(kind: str, cfg: io.RunConfig | None):
    def get(key, default):
        if cfg is None or not cfg.is_set(key):
            return default
        return cfg[key]
    if kind == "camembert":
        d = CamembertSpec()
        return CamembertSpec(width=get("grid.width", d.width), depth=get("grid.depth", d.depth),
                             spacing=get("grid.spacing", d.spacing),
                             background=get("grid.background", d.background),
                             anomaly=get("grid.anomaly", d.anomaly), radius=get("grid.radius", d.radius))
    d = CheckerboardSpec()
    return CheckerboardSpec(nx=get("grid.nx", d.nx), nz=get("grid.nz", d.nz),
                            spacing=get("grid.spacing", d.spacing),
                            background=get("grid.background", d.background),
                            perturbation=get("grid.perturbation", d.perturbation),
                            tile=get("grid.tile", d.tile), margin=get("grid.margin", d.margin))


def _wavelet(cfg: io.RunConfig):
    time = cfg.time
    if cfg["wavelet.kind"] == "ricker":
        return ricker(cfg["wavelet.frequency"], time, cfg["wavelet.delay"])
    low, high = cfg["wavelet.low"], cfg["wavelet.high"]
    if low is None or high is None:
        raise ConfigError([f"{cfg.source}: wavelet.kind = bandpass needs wavelet.low and wavelet.high"])
    return bandpass_ricker(low, high, time, cfg["wavelet.delay"])


def _load_gathers(data_dir: Path):
    files = sorted(data_dir.glob("shot_*.wds"))
    if not files:
        raise UsageError(f"no shot_*.wds files in {data_dir}")
    return [io.read_gather(f) for f in files]


def _threads(args) -> int:
    return max(1, args.threads or os.cpu_count() or 1)


# ------------------------------------------------------------------ commands

def cmd_make_model(args) -> int:
    cfg = io.parse_config(args.spec, required=()) if args.spec else None
    model = (build_camembert if args.kind == "camembert" else build_checkerboard)(_model_spec(args.kind, cfg))
    out = io.write_model(args.out, model)
    echo = {"grid.kind": args.kind}
    echo.update({f"grid.{k}": v for k, v in vars(_model_spec(args.kind, cfg)).items()
                 if not isinstance(v, tuple) and v is not None})
    Path(str(out) + ".cfg").write_text(io.format_config(echo), encoding="utf-8")
    print(f"wrote {out} ({model.grid.nx} x {model.grid.nz}, dx={model.grid.dx} m)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = io.read_model(args.model)
    cfg = io.parse_config(args.config)
    acq = cfg.acquisition(model.grid)
    counter = SolveCounter()
    survey = simulate(model, acq, _wavelet(cfg), cfg.absorbing, counter, _threads(args))
    out = io.resolve_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for g in survey.observed:
        io.write_gather(out / io.gather_name(g.shot_id), g)
    print(f"wrote {survey.n_shots} gathers to {out}")
    print(f"wave solves: {counter.total}")
    return EXIT_OK


def _check_method(method: str, cfg: io.RunConfig):
    if method == "dri-exact":
        if cfg["dri.mu"] is None:
            raise UsageError("--method dri-exact needs dri.mu in the config")
        if cfg.is_set("dri.variant") and cfg["dri.variant"] != "exact":
            raise UsageError("config sets dri.variant = gradient-descent but --method is dri-exact")
    elif method == "dri" and cfg.is_set("dri.variant") and cfg["dri.variant"] != "gradient-descent":
        raise UsageError("config sets dri.variant = exact; use --method dri-exact")


def cmd_invert(args) -> int:
    cfg = io.parse_config(args.config)
    _check_method(args.method, cfg)
    init = io.read_model(args.init)
    truth = io.read_model(args.truth) if args.truth else None
    if truth is not None and truth.grid != init.grid:
        raise UsageError("truth and initial models are on different grids")
    gathers = _load_gathers(io.resolve_path(args.data))
    acq = cfg.acquisition(init.grid)
    if len(gathers) != acq.n_shots:
        raise UsageError(f"{len(gathers)} gathers but the config defines {acq.n_shots} sources")
    wavelet = _wavelet(cfg)
    # traces were stored as float32; a residual at that rounding level counts as zero
    survey = Survey(acq, wavelet, gathers, cfg.absorbing, quantization_floor(gathers, wavelet.time.dt))
    out = io.resolve_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "misfit.csv"
    if log_path.exists():
        log_path.unlink()
    every = cfg["inversion.snapshot_every"]
    logged = []

    def callback(state):
        rec = state.history[-1]
        io.append_misfit_log(log_path, rec)
        logged.append(rec.iteration)
        if every > 0 and rec.iteration % every == 0:
            io.write_model(out / f"model_{rec.iteration:04d}.wdg", state.model)

    if args.method == "fwi":
        state = fwi_invert(cfg.fwi(_threads(args)), survey, init, truth, callback)
    else:
        variant = "exact" if args.method == "dri-exact" else "gradient-descent"
        state = dri_invert(cfg.dri(variant, _threads(args)), survey, init, truth, callback)
    if state.final is not None and (not logged or state.final.iteration > logged[-1]):
        io.append_misfit_log(log_path, state.final)
    io.write_model(out / "final.wdg", state.model)
    final = state.final
    print(f"{args.method}: status={state.status} iterations={state.iteration} "
          f"normalized misfit={final.normalized_misfit:.6g}"
          + (f" model RMSE={final.model_rmse:.6g} m/s" if final.model_rmse is not None else ""))
    print(f"wave solves: {state.counter.total}")
    return EXIT_STALL if state.status == "stall" else EXIT_OK


def cmd_qmatrix(args) -> int:
    model = io.read_model(args.model)
    cfg = io.parse_config(args.config, required=()) if args.config else None
    try:
        spec = io.parse_positions(args.receivers)
    except ValueError as exc:
        raise UsageError(f"--receivers: {exc}") from None
    receivers = spec.positions(model.grid)
    dt = args.dt if args.dt else math.floor(cfl_max_dt(model) * 1e5) / 1e5
    time = TimeAxis(args.nt, dt)
    acq = Acquisition(model.grid, [receivers[0]], receivers)
    absorbing = cfg.absorbing if cfg is not None else None
    try:
        Q = assemble_Q_explicit(model, acq, time, absorbing)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    c = args.velocity or model.v_min
    report = verify_band_structure(Q, acq, c, args.halfwidth, args.threshold)
    out = io.resolve_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = Q.values.shape[0]
    io.write_grid(out / "Q.wdg", Grid2D(n, n, 1.0, 1.0), Q.values, "generic")
    with open(out / "band_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "max_shift", "band", "outside_fraction", "passed"])
        for b in report.blocks:
            w.writerow([b.i, b.j, repr(b.max_shift), repr(b.band), repr(b.outside_fraction), int(b.passed)])
    print(f"Q: {n} x {n}, asymmetry {Q.asymmetry:.3g}")
    print(f"band check at c={c:g} m/s: {'PASS' if report.passed else 'FAIL'} "
          f"(worst outside fraction {report.worst:.4g}, threshold {report.threshold:g})")
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = io.read_model(args.a), io.read_model(args.b)
    if a.grid != b.grid:
        raise UsageError("models are on different grids")
    diff = a.velocity - b.velocity
    print(f"rmse(a, b) = {float(np.sqrt(np.mean(diff ** 2))):.6g} m/s")
    print(f"max |a - b| = {float(np.max(np.abs(diff))):.6g} m/s")
    if args.truth:
        t = io.read_model(args.truth)
        if t.grid != a.grid:
            raise UsageError("truth model is on a different grid")
        print("model,truth_rmse")
        for name, m in (("a", a), ("b", b)):
            print(f"{name},{float(np.sqrt(np.mean((m.velocity - t.velocity) ** 2))):.6g}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wdri", description="2-D acoustic FWI and data reconstruction inversion")
    p.add_argument("--seed", type=int, default=0, help="seed for any randomised step (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-model", help="build a benchmark velocity model")
    s.add_argument("--kind", choices=("camembert", "checkerboard"), required=True)
    s.add_argument("--spec", help="config file with grid.* overrides")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_model)

    s = sub.add_parser("simulate", help="synthesise one gather per source")
    s.add_argument("--model", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("invert", help="run FWI or DRI")
    s.add_argument("--method", choices=("fwi", "dri", "dri-exact"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="true model, for RMSE reporting")
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("qmatrix", help="assemble G G^T densely and check its band structure")
    s.add_argument("--model", required=True)
    s.add_argument("--receivers", required=True, help="line(...), perimeter(...) or points(...)")
    s.add_argument("--nt", type=int, required=True)
    s.add_argument("--dt", type=float, help="time step (default: stability limit)")
    s.add_argument("--config", help="optional config for absorbing.* settings")
    s.add_argument("--velocity", type=float, help="velocity for the band bound (default: model minimum)")
    s.add_argument("--halfwidth", type=float, default=0.0, help="wavelet half-width added to the band, s")
    s.add_argument("--threshold", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_qmatrix)

    s = sub.add_parser("compare", help="velocity difference between two models")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--truth")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    try:
        return args.func(args)
    except ConfigError as exc:
        for m in exc.messages:
            print(f"error: {m}", file=sys.stderr)
        return EXIT_USAGE
    except StabilityError as exc:
        suggestion = math.floor(exc.dt_max * 1e5) / 1e5
        print(f"error: {exc}; try time.dt = {suggestion:g}", file=sys.stderr)
        return EXIT_NUMERIC
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, InvalidArgument, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WdriError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
