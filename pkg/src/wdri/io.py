"""On-disk formats: grids, shot gathers, misfit logs and run configs.

Grid file (``.wdg``)::

    WDG1
    nx=<int>
    nz=<int>
    dx=<float>
    dz=<float>
    ox=<float>
    oz=<float>
    kind=velocity|slowness-squared|generic
    end
    <nx*nz little-endian float32, z fastest>

Gather file (``.wds``) uses the same header layout with magic ``WDS1`` and
keys ``nt, nr, dt, shot_id, receivers`` followed by ``nt*nr`` float32 values
with the receiver index fastest.  Floats in headers are written with
``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .domain import (Acquisition, Grid2D, Position, ShotGather, SlownessSquaredModel, TimeAxis,
                     line_positions, perimeter_positions)
from .errors import ConfigError, FormatError, InvalidArgument
from .fwi import FwiConfig, IterationRecord
from .propagator import EDGES, AbsorbingConfig

GRID_MAGIC = "WDG1"
GATHER_MAGIC = "WDS1"
END = "end"
GRID_KINDS = ("velocity", "slowness-squared", "generic")
DATA_DIR_ENV = "WDRI_DATA_DIR"
DTYPE = np.dtype("<f4")


def resolve_path(path: str | os.PathLike) -> Path:
    """Relative paths are taken relative to ``$WDRI_DATA_DIR`` when it is set."""
    p = Path(path)
    if str(path) == "":
        raise InvalidArgument("empty path")
    base = os.environ.get(DATA_DIR_ENV)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


# ------------------------------------------------------------------ headers

def _write_header(fh, magic: str, items: list[tuple[str, object]]):
    lines = [magic] + [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in items] + [END]
    fh.write(("\n".join(lines) + "\n").encode("utf-8"))


def _read_header(buf: bytes, magic: str) -> tuple[dict[str, str], int]:
    """Parse the text header; returns (fields, offset of the binary block)."""
    offset = 0
    header: dict[str, str] = {}
    first = True
    while True:
        nl = buf.find(b"\n", offset)
        if nl < 0:
            raise FormatError("truncated header", offset)
        try:
            line = buf[offset:nl].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("header is not UTF-8", offset) from None
        if first:
            if line != magic:
                raise FormatError(f"bad magic {line[:8]!r}, expected {magic!r}", offset)
            first = False
        elif line == END:
            return header, nl + 1
        else:
            key, sep, value = line.partition("=")
            if not sep or not key:
                raise FormatError(f"malformed header line {line!r}", offset)
            header[key] = value
        offset = nl + 1


def _field(header: dict[str, str], key: str, typ, offset: int):
    if key not in header:
        raise FormatError(f"header lacks {key!r}", offset)
    try:
        return typ(header[key])
    except ValueError:
        raise FormatError(f"bad value for {key!r}: {header[key]!r}", offset) from None


def _read_block(buf: bytes, offset: int, count: int) -> np.ndarray:
    need = count * DTYPE.itemsize
    have = len(buf) - offset
    if have < need:
        raise FormatError(f"data block truncated: {have} of {need} bytes", len(buf))
    if have > need:
        raise FormatError(f"{have - need} unexpected trailing bytes", offset + need)
    return np.frombuffer(buf, DTYPE, count, offset).astype(np.float64)


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise InvalidArgument(f"{what} contains non-finite values")


# ------------------------------------------------------------------ grids

@dataclass(frozen=True)
class GridFile:
    grid: Grid2D
    values: np.ndarray
    kind: str = "generic"


def write_grid(path, grid: Grid2D, values: np.ndarray, kind: str = "generic") -> Path:
    if kind not in GRID_KINDS:
        raise InvalidArgument(f"unknown grid kind {kind!r}")
    values = np.asarray(values, dtype=np.float64)
    if values.shape != grid.shape:
        raise InvalidArgument(f"field shape {values.shape} differs from grid {grid.shape}")
    _check_finite(values, "grid field")
    path = resolve_path(path)
    items = [("nx", grid.nx), ("nz", grid.nz), ("dx", float(grid.dx)), ("dz", float(grid.dz)),
             ("ox", float(grid.origin[0])), ("oz", float(grid.origin[1])), ("kind", kind)]
    with open(path, "wb") as fh:
        _write_header(fh, GRID_MAGIC, items)
        fh.write(np.ascontiguousarray(values, dtype=DTYPE).tobytes())
    return path


def read_grid(path) -> GridFile:
    buf = resolve_path(path).read_bytes()
    header, off = _read_header(buf, GRID_MAGIC)
    nx, nz = _field(header, "nx", int, 0), _field(header, "nz", int, 0)
    grid = Grid2D(nx, nz, _field(header, "dx", float, 0), _field(header, "dz", float, 0),
                  (float(header.get("ox", 0.0)), float(header.get("oz", 0.0))))
    kind = header.get("kind", "generic")
    if kind not in GRID_KINDS:
        raise FormatError(f"unknown grid kind {kind!r}", 0)
    values = _read_block(buf, off, nx * nz).reshape(nx, nz)
    return GridFile(grid, values, kind)


def write_model(path, model: SlownessSquaredModel) -> Path:
    """Models are stored as velocity, the more readable quantity."""
    return write_grid(path, model.grid, model.velocity, "velocity")


def read_model(path) -> SlownessSquaredModel:
    gf = read_grid(path)
    if gf.kind == "velocity":
        return SlownessSquaredModel.from_velocity(gf.grid, gf.values)
    if gf.kind == "slowness-squared":
        return SlownessSquaredModel(gf.grid, gf.values)
    raise FormatError("grid holds a generic field, not a model", 0)


def read_raw_grid(path, nx: int, nz: int, dx: float, dz: float, order: str = "z-fastest",
                  dtype: str = "<f4") -> np.ndarray:
    """Import a headerless float grid such as the public Marmousi binaries."""
    raw = np.fromfile(resolve_path(path), dtype=np.dtype(dtype))
    if raw.size != nx * nz:
        raise FormatError(f"{raw.size} values, expected {nx * nz}", raw.size * np.dtype(dtype).itemsize)
    if order == "z-fastest":
        return raw.reshape(nx, nz).astype(np.float64)
    if order == "x-fastest":
        return raw.reshape(nz, nx).T.astype(np.float64)
    raise InvalidArgument(f"unknown ordering {order!r}")


# ------------------------------------------------------------------ gathers

def _format_points(points: np.ndarray) -> str:
    return ";".join(f"{float(x)!r},{float(z)!r}" for x, z in points)


def _parse_points(text: str, offset: int) -> np.ndarray:
    if not text:
        return np.zeros((0, 2))
    try:
        return np.array([[float(c) for c in p.split(",")] for p in text.split(";")], dtype=np.float64)
    except ValueError:
        raise FormatError("bad receiver list", offset) from None


def write_gather(path, gather: ShotGather) -> Path:
    _check_finite(gather.traces, "gather")
    rec = gather.receivers if gather.receivers is not None else np.zeros((0, 2))
    items = [("nt", gather.time.nt), ("nr", gather.nr), ("dt", float(gather.time.dt)),
             ("shot_id", int(gather.shot_id)), ("receivers", _format_points(np.asarray(rec)))]
    path = resolve_path(path)
    with open(path, "wb") as fh:
        _write_header(fh, GATHER_MAGIC, items)
        fh.write(np.ascontiguousarray(gather.traces, dtype=DTYPE).tobytes())
    return path


def read_gather(path) -> ShotGather:
    buf = resolve_path(path).read_bytes()
    header, off = _read_header(buf, GATHER_MAGIC)
    nt, nr = _field(header, "nt", int, 0), _field(header, "nr", int, 0)
    dt = _field(header, "dt", float, 0)
    rec = _parse_points(header.get("receivers", ""), 0)
    if rec.shape[0] not in (0, nr):
        raise FormatError(f"{rec.shape[0]} receiver positions for nr={nr}", 0)
    traces = _read_block(buf, off, nt * nr).reshape(nt, nr)
    return ShotGather(_field(header, "shot_id", int, 0), TimeAxis(nt, dt), traces,
                      rec if rec.shape[0] else None)


def gather_name(shot: int) -> str:
    return f"shot_{shot:04d}.wds"


# ------------------------------------------------------------------ misfit log

LOG_COLUMNS = ("iteration", "misfit", "normalized_misfit", "wave_solves", "wall_time", "model_rmse")


def _last_iteration(path: Path) -> int | None:
    last = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            last = int(row["iteration"])
    return last


def append_misfit_log(path, record: IterationRecord) -> None:
    path = resolve_path(path)
    new = not path.exists() or path.stat().st_size == 0
    if not new:
        last = _last_iteration(path)
        if last is not None and record.iteration <= last:
            raise InvalidArgument(f"iteration {record.iteration} does not follow {last}")
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerow([record.iteration, repr(float(record.misfit)), repr(float(record.normalized_misfit)),
                    record.wave_solves, repr(float(record.wall_time)),
                    "" if record.model_rmse is None else repr(float(record.model_rmse))])
        fh.flush()


def read_misfit_log(path) -> list[IterationRecord]:
    out = []
    with open(resolve_path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise FormatError("unexpected misfit log header", 0)
        for row in reader:
            out.append(IterationRecord(int(row["iteration"]), float(row["misfit"]),
                                       float(row["normalized_misfit"]), int(row["wave_solves"]),
                                       float(row["wall_time"]),
                                       float(row["model_rmse"]) if row["model_rmse"] else None))
    return out


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class PositionSpec:
    """Unresolved source/receiver layout; turned into positions once a grid is known."""

    kind: str
    args: tuple

    def positions(self, grid: Grid2D) -> list[Position]:
        if self.kind == "line":
            x0, z0, x1, z1, n = self.args
            return line_positions((x0, z0), (x1, z1), int(n))
        if self.kind == "perimeter":
            inset, n = self.args
            return perimeter_positions(grid, inset, int(n))
        return [tuple(p) for p in self.args]


_CALL = re.compile(r"^\s*(line|perimeter|points)\s*\((.*)\)\s*$")


def parse_positions(text: str) -> PositionSpec:
    """``line(x0, z0, x1, z1, n)``, ``perimeter(inset, n)`` or ``points(x z; x z; ...)``."""
    m = _CALL.match(text)
    if not m:
        raise ValueError(f"expected line(...), perimeter(...) or points(...), got {text!r}")
    kind, body = m.group(1), m.group(2)
    if kind == "points":
        pts = []
        for item in body.split(";"):
            parts = item.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"bad point {item.strip()!r}")
            pts.append((float(parts[0]), float(parts[1])))
        return PositionSpec(kind, tuple(pts))
    args = [float(a) for a in body.split(",")]
    expected = 5 if kind == "line" else 2
    if len(args) != expected:
        raise ValueError(f"{kind}() takes {expected} arguments, got {len(args)}")
    if args[-1] != int(args[-1]) or args[-1] < 1:
        raise ValueError("count must be a positive integer")
    return PositionSpec(kind, tuple(args))


def _edges(text: str) -> tuple[str, ...]:
    items = tuple(e.strip() for e in text.split(",") if e.strip())
    for e in items:
        if e not in EDGES:
            raise ValueError(f"unknown edge {e!r}")
    return items


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _optional_float(text: str):
    return None if text.lower() in ("none", "") else float(text)


REQUIRED = ("time.nt", "time.dt", "acquisition.sources", "acquisition.receivers")

# key -> (parser, default); the defaults are the documented defaults of the tool.
SCHEMA = {
    "grid.kind": (_choice("camembert", "checkerboard"), "camembert"),
    "grid.width": (float, 4800.0),
    "grid.depth": (float, 6000.0),
    "grid.spacing": (float, None),
    "grid.background": (float, None),
    "grid.anomaly": (float, 4600.0),
    "grid.radius": (float, 1000.0),
    "grid.nx": (int, 101),
    "grid.nz": (int, 101),
    "grid.perturbation": (float, 2500.0),
    "grid.tile": (float, 200.0),
    "grid.margin": (float, 0.0),
    "time.nt": (int, None),
    "time.dt": (float, None),
    "wavelet.kind": (_choice("ricker", "bandpass"), "ricker"),
    "wavelet.frequency": (float, 10.0),
    "wavelet.low": (float, None),
    "wavelet.high": (float, None),
    "wavelet.delay": (_optional_float, None),
    "acquisition.sources": (parse_positions, None),
    "acquisition.receivers": (parse_positions, None),
    "absorbing.width": (int, 20),
    "absorbing.strength": (float, 0.35),
    "absorbing.free_surface": (_edges, ()),
    "fwi.max_iterations": (int, 50),
    "fwi.direction": (_choice("steepest", "pseudo-hessian"), "pseudo-hessian"),
    "fwi.shrink": (float, 0.5),
    "fwi.armijo": (float, 1e-4),
    "fwi.max_trials": (int, 10),
    "fwi.step_fraction": (float, 0.01),
    "fwi.mask_halo": (int, 2),
    "fwi.tolerance": (float, 0.0),
    "dri.max_iterations": (int, 50),
    "dri.variant": (_choice("gradient-descent", "exact"), "gradient-descent"),
    "dri.mu": (_optional_float, None),
    "dri.cg_tolerance": (float, 1e-6),
    "dri.cg_max_iterations": (int, 50),
    "dri.storage_mode": (_choice("full", "boundary"), "full"),
    "dri.tolerance": (float, 0.0),
    "dri.mask_halo": (int, 2),
    "inversion.vmin": (float, 1000.0),
    "inversion.vmax": (float, 6000.0),
    "inversion.epsilon": (float, 1e-3),
    "inversion.snapshot_every": (int, 10),
    "inversion.threads": (int, 1),
}


@dataclass
class RunConfig:
    values: dict[str, object]
    lines: dict[str, int] = field(default_factory=dict)
    source: str = "<string>"

    def __getitem__(self, key: str):
        return self.values[key]

    def is_set(self, key: str) -> bool:
        return key in self.lines

    @property
    def time(self) -> TimeAxis:
        return TimeAxis(self["time.nt"], self["time.dt"])

    @property
    def absorbing(self) -> AbsorbingConfig:
        return AbsorbingConfig(self["absorbing.width"], self["absorbing.strength"],
                               tuple(self["absorbing.free_surface"]))

    def acquisition(self, grid: Grid2D) -> Acquisition:
        return Acquisition(grid, self["acquisition.sources"].positions(grid),
                           self["acquisition.receivers"].positions(grid))

    def fwi(self, threads: int | None = None) -> FwiConfig:
        return FwiConfig(max_iterations=self["fwi.max_iterations"], shrink=self["fwi.shrink"],
                         armijo=self["fwi.armijo"], max_trials=self["fwi.max_trials"],
                         direction=self["fwi.direction"], mask_halo=self["fwi.mask_halo"],
                         tolerance=self["fwi.tolerance"], step_fraction=self["fwi.step_fraction"],
                         epsilon=self["inversion.epsilon"], vmin=self["inversion.vmin"],
                         vmax=self["inversion.vmax"], threads=threads or self["inversion.threads"])

    def dri(self, variant: str | None = None, threads: int | None = None):
        from .dri import DriConfig
        return DriConfig(max_iterations=self["dri.max_iterations"], variant=variant or self["dri.variant"],
                         mu=self["dri.mu"], cg_tolerance=self["dri.cg_tolerance"],
                         cg_max_iterations=self["dri.cg_max_iterations"],
                         storage_mode=self["dri.storage_mode"], tolerance=self["dri.tolerance"],
                         epsilon=self["inversion.epsilon"], vmin=self["inversion.vmin"],
                         vmax=self["inversion.vmax"], mask_halo=self["dri.mask_halo"],
                         threads=threads or self["inversion.threads"])


def parse_config_text(text: str, source: str = "<string>", required=REQUIRED) -> RunConfig:
    errors: list[str] = []
    values = {k: d for k, (_, d) in SCHEMA.items()}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        if key not in SCHEMA:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in lines:
            errors.append(f"{source}:{lineno}: {key!r} already set on line {lines[key]}")
            continue
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key!r}: {exc}")
            continue
        lines[key] = lineno
    for key in required:
        if key not in lines:
            errors.append(f"{source}: missing required key {key!r}")
    if errors:
        raise ConfigError(errors)
    return RunConfig(values, lines, source)


def parse_config(path, required=REQUIRED) -> RunConfig:
    path = resolve_path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError([f"{path}: not UTF-8 text"]) from None
    return parse_config_text(text, str(path), required)


def format_config(values: dict[str, object]) -> str:
    """Render ``key = value`` lines for keys that have a value (used for sidecar echoes)."""
    out = []
    for key, v in values.items():
        if v is None or isinstance(v, (PositionSpec, tuple)):
            continue
        out.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
    return "\n".join(out) + "\n"
