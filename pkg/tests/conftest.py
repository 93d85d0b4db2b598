import numpy as np
import pytest

from wdri.domain import Acquisition, Grid2D, SlownessSquaredModel, TimeAxis, ricker
from wdri.propagator import AbsorbingConfig
from wdri.survey import simulate


def blob_model(grid, background=2000.0, bump=300.0, width=3.0):
    X, Z = np.meshgrid(np.arange(grid.nx), np.arange(grid.nz), indexing="ij")
    r2 = (X - grid.nx / 2) ** 2 + (Z - grid.nz / 2) ** 2
    return SlownessSquaredModel.from_velocity(grid, background + bump * np.exp(-r2 / (2 * width ** 2)))


@pytest.fixture(scope="session")
def small():
    """21x21 grid, two shots, three receivers, no sponge."""
    g = Grid2D(21, 21, 10.0, 10.0)
    t = TimeAxis(160, 0.002)
    acq = Acquisition(g, [(40.0, 50.0), (40.0, 150.0)], [(160.0, 40.0), (160.0, 100.0), (160.0, 160.0)])
    truth = blob_model(g, bump=250.0)
    ab = AbsorbingConfig(layer_width=8)
    survey = simulate(truth, acq, ricker(25.0, t), ab)
    init = SlownessSquaredModel.from_velocity(g, np.full(g.shape, 2000.0))
    return {"grid": g, "time": t, "acq": acq, "truth": truth, "init": init, "survey": survey, "absorbing": ab}


# acceptance lines, printed once at the end of the run: {criterion: [(ok, detail), ...]}
ACCEPTANCE: dict[str, list[tuple[bool, str]]] = {}


def report(criterion, ok, detail):
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        parts = ACCEPTANCE[key]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"{key} {status}  " + "; ".join(d for _, d in parts))
