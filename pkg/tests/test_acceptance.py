"""Acceptance suite: ten end-to-end criteria at their stated tolerances.

Each test prints one ``CRITERION k: PASS|FAIL`` line straight to the
terminal (also when run as ``python3 tests/test_acceptance.py``).
"""

import filecmp
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from selfaffine.attractor import BoxWindow, cylinders, sigma_refined
from selfaffine.density import (
    BoxDiameters,
    amplification_density,
    convolution_check,
    dim_estimate,
    measure_estimate,
    scale_covariance,
)
from selfaffine.digits import decide_osc, enumerate_DM
from selfaffine.linalg import make_system
from selfaffine.pseudo_norm import build_pseudo_norm, comparability_fit, sample_annulus

PRODUCT_D = [[x, y] for y in range(3) for x in range(2)]
_capsys_holder = {}


@pytest.fixture(autouse=True)
def _terminal(capsys):
    _capsys_holder["c"] = capsys
    yield
    _capsys_holder.pop("c", None)


def report(k: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    cap = _capsys_holder.get("c")
    if cap is None:
        print(line)
    else:
        with cap.disabled():
            print("\n" + line)
    assert ok, line


def interval_oracle(values: np.ndarray, weights: np.ndarray, s: float, side_K: float = 1.0,
                    chunk: int = 512) -> float:
    """Sup of ``mu(U) / (|U| + |K|)^s`` over every interval with endpoints in the data."""
    order = np.argsort(values)
    v, m = values[order], weights[order].astype(float)
    cw = np.concatenate([[0.0], np.cumsum(m)])
    P = len(v)
    best = 0.0
    for a in range(0, P, chunk):
        i = np.arange(a, min(a + chunk, P))[:, None]
        j = np.arange(P)[None, :]
        valid = j >= i
        L = np.where(valid, v[np.minimum(np.maximum(j, i), P - 1)] - v[i], 0.0)
        mass = np.where(valid, cw[np.minimum(j + 1, P)] - cw[i], 0.0)
        best = max(best, float(np.max(mass / (L + side_K) ** s)))
    return best


def test_criterion_1_cantor_measure():
    sys_ = make_system([[3]], [[0], [2]])
    w = build_pseudo_norm(sys_, "exact")
    t0 = time.perf_counter()
    mb = measure_estimate(sys_, w, 14)
    elapsed = time.perf_counter() - t0
    e = enumerate_DM(sys_, 14)
    oracle = interval_oracle(e.values[:, 0], e.weights, sys_.s)
    ok = (mb.H_lo <= 1.0 <= mb.H_hi + 1e-12 and mb.H_hi - mb.H_lo <= 0.15 and elapsed <= 60
          and mb.density.best <= oracle * (1 + 1e-12)
          and abs(mb.density.best - oracle) <= 1e-9 * oracle)
    report(1, ok, f"s={mb.s:.6f} bracket=[{mb.H_lo:.9f}, {mb.H_hi:.9f}] "
                  f"sweep={mb.density.best:.12f} oracle={oracle:.12f} time={elapsed:.1f}s")


def test_criterion_2_intervals():
    details, ok = [], True
    for D, target, tol in (([[0], [1]], 1.0, 0.05), ([[0], [3]], 3.0, 0.15)):
        sys_ = make_system([[2]], D)
        mb = measure_estimate(sys_, build_pseudo_norm(sys_, "exact"), 16)
        good = mb.H_lo - tol <= target <= mb.H_hi + tol and mb.H_lo <= mb.H_hi
        ok &= good
        details.append(f"D={[d[0] for d in D]}: [{mb.H_lo:.6f}, {mb.H_hi:.6f}]")
    report(2, ok, "; ".join(details))


def test_criterion_3_fails_path():
    sys_ = make_system([[3]], [[0], [1], [3]])
    w = build_pseudo_norm(sys_, "exact")
    v = decide_osc(sys_)
    d2 = enumerate_DM(sys_, 2)
    amp = amplification_density(sys_, w, v.witness, 10)
    mb = measure_estimate(sys_, w, 12, verdict=v)
    ok = (v.status == "Fails" and v.witness.depth == 2 and v.witness.replay(sys_)
          and d2.distinct == 8 and amp["ratio"] > 1e3 and mb.H_hi <= 0.1)
    report(3, ok, f"{v.status} witness {v.witness.word_a}~{v.witness.word_b} #D_2={d2.distinct} "
                  f"density(k=10)={amp['ratio']:.1f} H_hi={mb.H_hi:.6g}")


def test_criterion_4_exact_decisions():
    cases = [([[2]], [[0], [1]]), ([[2]], [[0], [3]]), ([[2, 0], [0, 3]], PRODUCT_D)]
    ok, details = True, []
    for A, D in cases:
        sys_ = make_system(A, D)
        t0 = time.perf_counter()
        v = decide_osc(sys_)
        dt = time.perf_counter() - t0
        ok &= v.status == "Holds" and v.method == "integer-automaton" and dt <= 1.0
        details.append(f"{v.status} {dt * 1000:.1f}ms")
    axes = [decide_osc(make_system([[2]], [[0], [1]])).status,
            decide_osc(make_system([[3]], [[0], [1], [2]])).status]
    ok &= axes == ["Holds", "Holds"]
    report(4, ok, ", ".join(details) + f"; per-axis {axes}")


def test_criterion_5_mollified_properties():
    t0 = time.perf_counter()
    sys_ = make_system([[2, 0], [0, 3]], PRODUCT_D)
    w = build_pseudo_norm(sys_, "mollified", delta=0.25)
    rng = np.random.default_rng(2024)
    x = rng.standard_normal((10_000, 2)) * np.exp(rng.uniform(-5, 5, (10_000, 1)))
    wx, wAx = w(x), w(x @ sys_.A.entries.T)
    homog = float(np.max(np.abs(wAx - math.sqrt(6) * wx) / wAx))
    sym = bool(np.array_equal(w(-x), wx))
    ys = sample_annulus(sys_.norm, 10_000, rng)
    wy = w(ys)
    annulus = bool(np.all(wy >= w.alpha) and np.all(wy <= w.upper_on_V))
    fit = comparability_fit(w, 0.1)
    elapsed = time.perf_counter() - t0
    ok = homog <= 1e-9 and sym and annulus and fit.C <= 1e3 and fit.violations == 0 and elapsed <= 120
    report(5, ok, f"homogeneity err={homog:.2e} symmetric={sym} annulus in "
                  f"[{w.alpha:.4f}, {w.upper_on_V:.4f}]: {annulus} C={fit.C:.3f} "
                  f"violations={fit.violations} time={elapsed:.1f}s")


def test_criterion_6_convolution():
    sys_ = make_system([[2]], [[0], [1]])
    rng = np.random.default_rng(6)
    zs = []
    for M in (1, 2, 3):
        for t in range(5):
            a = rng.uniform(-0.5, 2.0**M)
            W = BoxWindow.make([a], [a + rng.uniform(0.2, 2.0 ** (M - 1) + 0.5)])
            zs.append(convolution_check(sys_, M, W, samples=100_000, seed=100 * M + t).z)
    good = sum(abs(z) <= 3 for z in zs)
    report(6, good >= 14, f"{good}/15 trials with |z|<=3; max |z|={max(abs(z) for z in zs):.2f}")


def test_criterion_7_dimensions():
    prod = dim_estimate(make_system([[2, 0], [0, 3]], PRODUCT_D), M=7)
    cantor = dim_estimate(make_system([[3]], [[0], [2]]), M=12)
    lo, hi = math.log(6) / math.log(3), math.log(6) / math.log(2)
    ok = (1.9 <= prod.euclid_dim_hat <= 2.1 and lo <= prod.euclid_dim_hat <= hi
          and abs(prod.bounds[0] - lo) < 1e-9 and abs(prod.bounds[1] - hi) < 1e-9
          and abs(cantor.s_w_hat - 0.631) <= 0.02)
    report(7, ok, f"product euclid={prod.euclid_dim_hat:.4f} in [{lo:.3f}, {hi:.3f}]; "
                  f"Cantor s_w_hat={cantor.s_w_hat:.4f}")


def test_criterion_8_lower_bound_principle():
    cases = [("cantor", [[3]], [[0], [2]], "exact", 12),
             ("interval", [[2]], [[0], [1]], "exact", 14),
             ("product", [[2, 0], [0, 3]], PRODUCT_D, "step", 5)]
    rng = np.random.default_rng(8)
    ok, details = True, []
    for name, A, D, variant, M in cases:
        sys_ = make_system(A, D)
        w = build_pseudo_norm(sys_, variant)
        mb = measure_estimate(sys_, w, M)
        cyl = cylinders(sys_, mb.sigma_depth)
        n = sys_.n
        lo = rng.uniform(-0.3, 1.0, (100, n))
        hi = lo + rng.uniform(1e-3, 1.0, (100, n)) * rng.choice([0.05, 0.3, 1.0], (100, 1))
        slo, _ = sigma_refined(sys_, cyl, [BoxWindow.make(a, b) for a, b in zip(lo, hi)])
        d = BoxDiameters(w).hi(hi - lo)
        slack = float(np.max(mb.H_lo * slo - d**sys_.s))
        good = mb.verdict == "Holds" and slack <= 1e-6
        ok &= good
        details.append(f"{name} H_lo={mb.H_lo:.4f} max excess={slack:.2e}")
    report(8, ok, "; ".join(details))


def _cli(cmd, cfg, out, threads):
    r = subprocess.run([sys.executable, "-m", "selfaffine", cmd, "--config", str(cfg),
                        "--out", str(out), "--threads", str(threads), "--seed", "7"],
                       capture_output=True, text=True)
    return r.returncode


def _tree_equal(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "product.ini"
    cfg.write_text("[system]\nmatrix = [[2, 0], [0, 3]]\n"
                   f"digits = {PRODUCT_D}\n[norm]\nvariant = mollified\n"
                   "[measure]\ndepth = 4\nsigma_depth = 4\nlo_windows = 64\n"
                   "[density]\ndepth = 4\n[render]\ndepth = 4\nsamples = 50000\nwidth = 64\nheight = 64\n"
                   "[probe]\nsamples = 100\n")
    runs = {"a": 1, "b": 1, "c": 8}
    codes = []
    for tag, th in runs.items():
        for cmd in ("check-osc", "measure", "render", "norm-probe", "density"):
            codes.append(_cli(cmd, cfg, tmp_path / tag, th))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same = _tree_equal(tmp_path / "a", tmp_path / "b") and _tree_equal(tmp_path / "a", tmp_path / "c")
    ok = same and all(c == 0 for c in codes) and len(files) >= 9
    report(9, ok, f"{len(files)} files identical across reruns and threads 1/8: {same}; exit codes {set(codes)}")


def test_criterion_10_scale_covariance():
    errs = []
    for A, D, variant, M in (([[3]], [[0], [2]], "exact", 8),
                             ([[2, 0], [0, 3]], PRODUCT_D, "step", 4),
                             ([[2, 0], [0, 3]], PRODUCT_D, "mollified", 3),
                             ([[1, -1], [1, 1]], [[0, 0], [1, 0]], "exact", 10)):
        sys_ = make_system(A, D)
        errs.append(scale_covariance(sys_, build_pseudo_norm(sys_, variant), M, count=50).max_rel_err)
    report(10, max(errs) <= 1e-9, "max relative errors " + ", ".join(f"{e:.1e}" for e in errs))


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
