import numpy as np
import pytest

from wdri import io
from wdri.cli import main

SMALL_MODEL = """\
grid.kind = checkerboard
grid.nx = 31
grid.nz = 31
grid.spacing = 20
grid.tile = 100
grid.margin = 100
grid.perturbation = 300
grid.background = 2000
"""

RUN = """\
time.nt = 200
time.dt = 0.003
wavelet.frequency = 12
acquisition.sources = line(60, 100, 60, 500, 2)
acquisition.receivers = line(540, 60, 540, 540, 7)
absorbing.width = 10
dri.max_iterations = 3
fwi.max_iterations = 2
inversion.snapshot_every = 2
"""


@pytest.fixture
def work(tmp_path):
    (tmp_path / "model.cfg").write_text(SMALL_MODEL)
    (tmp_path / "run.cfg").write_text(RUN)
    assert main(["make-model", "--kind", "checkerboard", "--spec", str(tmp_path / "model.cfg"),
                 "--out", str(tmp_path / "truth.wdg")]) == 0
    init = io.read_model(tmp_path / "truth.wdg")
    io.write_model(tmp_path / "init.wdg", init.with_m(np.full(init.grid.shape, 1 / 2000.0 ** 2)))
    assert main(["simulate", "--model", str(tmp_path / "truth.wdg"), "--config", str(tmp_path / "run.cfg"),
                 "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def test_make_model_defaults(tmp_path, capsys):
    assert main(["make-model", "--kind", "checkerboard", "--out", str(tmp_path / "c.wdg")]) == 0
    m = io.read_model(tmp_path / "c.wdg")
    assert m.grid.shape == (101, 101) and m.grid.dx == 20.0
    assert "grid.kind = checkerboard" in (tmp_path / "c.wdg.cfg").read_text()
    assert main(["make-model", "--kind", "camembert", "--out", str(tmp_path / "k.wdg")]) == 0
    k = io.read_model(tmp_path / "k.wdg")
    assert k.grid.dx == 35.5
    np.testing.assert_allclose(np.unique(np.round(k.velocity)), [4000.0, 4600.0])


def test_make_model_usage_errors(tmp_path):
    assert main(["make-model", "--kind", "camembert"]) == 2
    assert main(["make-model", "--kind", "marmousi", "--out", str(tmp_path / "x")]) == 2
    (tmp_path / "bad.cfg").write_text("grid.tile = 33\n")
    assert main(["make-model", "--kind", "checkerboard", "--spec", str(tmp_path / "bad.cfg"),
                 "--out", str(tmp_path / "x")]) == 2


def test_simulate_outputs(work, capsys):
    files = sorted(p.name for p in (work / "data").iterdir())
    assert files == ["shot_0000.wds", "shot_0001.wds"]
    g = io.read_gather(work / "data" / "shot_0001.wds")
    assert g.traces.shape == (200, 7) and g.shot_id == 1


def test_simulate_prints_solves(work, capsys):
    main(["simulate", "--model", str(work / "truth.wdg"), "--config", str(work / "run.cfg"),
          "--out", str(work / "again")])
    assert "wave solves: 2" in capsys.readouterr().out
    for name in ("shot_0000.wds", "shot_0001.wds"):
        assert (work / "again" / name).read_bytes() == (work / "data" / name).read_bytes()


def test_simulate_cfl_violation(work, capsys):
    (work / "fast.cfg").write_text(RUN.replace("time.dt = 0.003", "time.dt = 0.02"))
    code = main(["simulate", "--model", str(work / "truth.wdg"), "--config", str(work / "fast.cfg"),
                 "--out", str(work / "x")])
    assert code == 3
    assert "try time.dt = " in capsys.readouterr().err


def test_simulate_missing_model(work):
    assert main(["simulate", "--model", str(work / "nope.wdg"), "--config", str(work / "run.cfg"),
                 "--out", str(work / "x")]) == 2


def test_simulate_config_typo(work, capsys):
    (work / "typo.cfg").write_text(RUN + "dri.mu_typo = 1\n")
    assert main(["simulate", "--model", str(work / "truth.wdg"), "--config", str(work / "typo.cfg"),
                 "--out", str(work / "x")]) == 2
    assert "typo.cfg:10: unknown key 'dri.mu_typo'" in capsys.readouterr().err


def test_invert_from_truth_exits_immediately(work, capsys):
    for method in ("dri", "fwi"):
        out = work / f"self_{method}"
        assert main(["invert", "--method", method, "--data", str(work / "data"), "--init", str(work / "truth.wdg"),
                     "--config", str(work / "run.cfg"), "--out", str(out)]) == 0
        log = io.read_misfit_log(out / "misfit.csv")
        assert [r.iteration for r in log] == [0]
        assert "status=converged iterations=0" in capsys.readouterr().out


def test_invert_dri_writes_artifacts(work, capsys):
    out = work / "dri"
    assert main(["invert", "--method", "dri", "--data", str(work / "data"), "--init", str(work / "init.wdg"),
                 "--config", str(work / "run.cfg"), "--out", str(out), "--truth", str(work / "truth.wdg")]) == 0
    log = io.read_misfit_log(out / "misfit.csv")
    assert [r.iteration for r in log] == [0, 1, 2, 3]
    assert all(r.wave_solves == 8 for r in log[:3])
    assert log[-1].normalized_misfit < 1.0
    assert all(r.model_rmse is not None for r in log)
    assert sorted(p.name for p in out.glob("model_*.wdg")) == ["model_0000.wdg", "model_0002.wdg"]
    assert io.read_model(out / "final.wdg").grid.shape == (31, 31)
    assert "wave solves: 26" in capsys.readouterr().out


def test_invert_is_reproducible(work):
    for name in ("r1", "r2"):
        assert main(["--seed", "3", "--threads", "1", "invert", "--method", "fwi", "--data", str(work / "data"),
                     "--init", str(work / "init.wdg"), "--config", str(work / "run.cfg"),
                     "--out", str(work / name)]) == 0
    assert (work / "r1" / "final.wdg").read_bytes() == (work / "r2" / "final.wdg").read_bytes()


def test_invert_method_mismatch(work):
    args = ["--data", str(work / "data"), "--init", str(work / "init.wdg"), "--out", str(work / "o")]
    assert main(["invert", "--method", "dri-exact", "--config", str(work / "run.cfg")] + args) == 2
    (work / "ex.cfg").write_text(RUN + "dri.variant = exact\ndri.mu = 1.0\n")
    assert main(["invert", "--method", "dri", "--config", str(work / "ex.cfg")] + args) == 2


def test_invert_exact_variant(work):
    (work / "ex.cfg").write_text(RUN.replace("dri.max_iterations = 3", "dri.max_iterations = 1")
                                 + "dri.mu = 1e-9\ndri.cg_max_iterations = 3\n")
    assert main(["invert", "--method", "dri-exact", "--data", str(work / "data"), "--init", str(work / "init.wdg"),
                 "--config", str(work / "ex.cfg"), "--out", str(work / "ex")]) == 0
    assert len(io.read_misfit_log(work / "ex" / "misfit.csv")) == 2


def test_invert_stall_exit_code(work):
    (work / "stall.cfg").write_text(RUN + "fwi.step_fraction = 50\nfwi.max_trials = 1\n")
    code = main(["invert", "--method", "fwi", "--data", str(work / "data"), "--init", str(work / "init.wdg"),
                 "--config", str(work / "stall.cfg"), "--out", str(work / "st")])
    assert code == 4
    assert len(io.read_misfit_log(work / "st" / "misfit.csv")) >= 1


def test_qmatrix(work, capsys):
    out = work / "q"
    code = main(["qmatrix", "--model", str(work / "init.wdg"), "--receivers", "points(300 300)", "--nt", "40",
                 "--dt", "0.004", "--halfwidth", "0.1", "--out", str(out)])
    assert code == 0
    q = io.read_grid(out / "Q.wdg")
    assert q.values.shape == (40, 40)
    rows = (out / "band_report.csv").read_text().splitlines()
    assert rows[0] == "i,j,max_shift,band,outside_fraction,passed" and len(rows) == 2
    assert "band check" in capsys.readouterr().out


def test_qmatrix_refuses_oversize(work, capsys):
    code = main(["qmatrix", "--model", str(work / "init.wdg"), "--receivers", "line(300, 100, 300, 500, 5)",
                 "--nt", "1000", "--out", str(work / "q")])
    assert code == 2
    assert "limit" in capsys.readouterr().err
    assert main(["qmatrix", "--model", str(work / "init.wdg"), "--receivers", "circle(1)", "--nt", "4",
                 "--out", str(work / "q")]) == 2


def test_compare(work, capsys):
    assert main(["compare", "--a", str(work / "truth.wdg"), "--b", str(work / "truth.wdg")]) == 0
    assert "rmse(a, b) = 0 m/s" in capsys.readouterr().out
    assert main(["compare", "--a", str(work / "init.wdg"), "--b", str(work / "truth.wdg"),
                 "--truth", str(work / "truth.wdg")]) == 0
    out = capsys.readouterr().out
    assert "model,truth_rmse" in out and "b,0" in out
    main(["make-model", "--kind", "checkerboard", "--out", str(work / "big.wdg")])
    assert main(["compare", "--a", str(work / "big.wdg"), "--b", str(work / "truth.wdg")]) == 2
