import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from selfaffine.cli import main
from selfaffine.io import read_csv, read_pnm, read_summary


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


CANTOR = "[system]\nmatrix = [[3]]\ndigits = [[0], [2]]\n[norm]\nvariant = exact\n"
COLLISION = "[system]\nmatrix = [[3]]\ndigits = [[0], [1], [3]]\n[norm]\nvariant = exact\n"
PRODUCT = "[system]\nmatrix = [[2, 0], [0, 3]]\ndigits = [[0,0],[1,0],[0,1],[1,1],[0,2],[1,2]]\n"


def run(tmp_path, cmd, cfg, *extra):
    out = tmp_path / "out"
    return main([cmd, "--config", cfg, "--out", str(out), *extra]), out


def test_check_osc_exit_codes(tmp_path):
    code, out = run(tmp_path, "check-osc", write(tmp_path, "c.ini", CANTOR))
    assert code == 0 and read_summary(out / "osc_report.txt")["status"] == "Holds"
    code, out = run(tmp_path, "check-osc", write(tmp_path, "x.ini", COLLISION))
    rep = read_summary(out / "osc_report.txt")
    assert code == 1 and rep["status"] == "Fails" and '"depth":2' in rep["witness"]
    flt = "[system]\nmatrix = [[2.0]]\ndigits = [[0.0], [1.0]]\nmode = float\n[budgets]\nmax_depth = 6\n"
    code, out = run(tmp_path, "check-osc", write(tmp_path, "f.ini", flt))
    assert code == 2
    header, rows = read_csv(out / "osc_trend.csv")
    assert header == ["depth", "distinct", "words", "min_separation"] and len(rows) == 6


def test_config_and_budget_errors(tmp_path, capsys):
    bad = write(tmp_path, "b.ini", "[system]\nmatrix = [[1]]\ndigits = [[0], [1]]\n")
    assert run(tmp_path, "check-osc", bad)[0] == 64
    assert main(["measure", "--config", str(tmp_path / "missing.ini")]) == 64
    assert main(["no-such-command"]) == 64
    tight = write(tmp_path, "t.ini", CANTOR + "[measure]\ndepth = 14\n[budgets]\npoints = 1000\n")
    assert run(tmp_path, "measure", tight)[0] == 65


def test_measure_outputs(tmp_path):
    cfg = write(tmp_path, "c.ini", CANTOR + "[measure]\ndepth = 10\n")
    code, out = run(tmp_path, "measure", cfg)
    assert code == 0
    summ = read_summary(out / "measure_summary.txt")
    for key in ("s", "H_lo", "H_hi", "verdict", "seeds", "budgets", "config_hash", "config"):
        assert key in summ
    assert float(summ["s"]) == pytest.approx(math.log(2) / math.log(3))
    assert float(summ["H_lo"]) <= 1 + 1e-9 <= float(summ["H_hi"]) + 2e-9
    header, rows = read_csv(out / "density.csv")
    assert header == ["scale", "family", "windows_swept", "sup_ratio"] and rows
    assert (out / "density.csv").read_text().startswith(f"# config_hash = {summ['config_hash']}\n")
    assert list((out / "cache").glob("expansions-*.csv"))


def test_measure_collision(tmp_path):
    cfg = write(tmp_path, "x.ini", COLLISION + "[measure]\ndepth = 8\n")
    code, out = run(tmp_path, "measure", cfg)
    summ = read_summary(out / "measure_summary.txt")
    assert code == 0 and summ["verdict"] == "Fails" and float(summ["H_hi"]) < 0.01


def test_render_sierpinski(tmp_path):
    cfg = write(tmp_path, "s.ini", "[system]\nmatrix = [[2, 0], [0, 2]]\ndigits = [[0,0],[1,0],[0,1]]\n"
                                   "[render]\ndepth = 5\nwidth = 64\nheight = 64\n")
    code, out = run(tmp_path, "render", cfg)
    magic, comments, img = read_pnm(out / "render.pgm")
    assert code == 0 and magic == "P5" and img.shape == (64, 64)
    assert np.count_nonzero(img) == 3**5
    assert any(c.startswith("viewport = ") for c in comments)
    assert any(c.startswith("config_hash = ") for c in comments)
    header, rows = read_csv(out / "cloud.csv")
    assert header == ["x1", "x2"] and len(rows) == 3**5


def test_render_cantor_histogram(tmp_path):
    cfg = write(tmp_path, "c.ini", CANTOR + "[render]\nsamples = 20000\nwidth = 27\nheight = 8\n")
    code, out = run(tmp_path, "render", cfg)
    _, _, img = read_pnm(out / "render.pgm")
    bottom = img[-1] > 0
    # occupied bins are exactly the depth-3 Cantor intervals
    expected = np.zeros(27, dtype=bool)
    for i in range(27):
        digits = [(i // 3**k) % 3 for k in range(3)]
        expected[i] = 1 not in digits
    assert np.array_equal(bottom, expected)


def test_render_ppm_and_3d(tmp_path):
    cfg = write(tmp_path, "c.ini", CANTOR + "[render]\ndepth = 4\nformat = ppm\n")
    code, out = run(tmp_path, "render", cfg)
    assert code == 0 and read_pnm(out / "render.ppm")[0] == "P6"
    cube = write(tmp_path, "k.ini", "[system]\nmatrix = [[2,0,0],[0,2,0],[0,0,2]]\n"
                                    "digits = [[0,0,0],[1,0,0],[0,1,0],[0,0,1]]\n[render]\ndepth = 2\n")
    code, out = run(tmp_path, "render", cube)
    assert code == 64 and (out / "cloud.csv").exists()


def test_norm_probe(tmp_path):
    pts = tmp_path / "pts.csv"
    pts.write_text("x1,x2\n0,0\n0.3,-0.2\n0.6,-0.6\n1.5,2.25\n")
    cfg = write(tmp_path, "p.ini", PRODUCT + "[norm]\nvariant = mollified\n")
    code, out = run(tmp_path, "norm-probe", cfg, "--points", str(pts))
    assert code == 0
    header, rows = read_csv(out / "norm_probe.csv")
    assert header == ["x1", "x2", "w", "w_Ax", "ratio"]
    assert float(rows[0][2]) == 0.0
    for r in rows[1:]:
        assert float(r[4]) == pytest.approx(math.sqrt(6), rel=1e-9)
    const = read_summary(out / "norm_constants.txt")
    for key in ("p", "alpha", "beta_hat", "lambda_eps", "comparability"):
        assert key in const


def test_norm_probe_annulus_default(tmp_path):
    cfg = write(tmp_path, "p.ini", PRODUCT + "[norm]\nvariant = step\n[probe]\nsamples = 50\n")
    code, out = run(tmp_path, "norm-probe", cfg)
    _, rows = read_csv(out / "norm_probe.csv")
    const = read_summary(out / "norm_constants.txt")
    vals = np.array([float(r[2]) for r in rows[1:]])
    assert float(rows[0][2]) == 0.0 and len(vals) == 50
    assert np.all(vals >= float(const["alpha"])) and np.all(vals <= float(const["annulus_upper"]))


def test_density_command(tmp_path):
    cfg = write(tmp_path, "c.ini", CANTOR + "[density]\ndepth = 8\ntrace_point = [0.25]\n")
    code, out = run(tmp_path, "density", cfg)
    summ = read_summary(out / "density_summary.txt")
    assert code == 0 and float(summ["best"]) == pytest.approx(1.0)
    assert (out / "density_sweep.csv").exists() and (out / "trace.csv").exists()


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "c.ini", CANTOR)
    r = subprocess.run([sys.executable, "-m", "selfaffine", "check-osc", "--config", cfg,
                        "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("Holds")
