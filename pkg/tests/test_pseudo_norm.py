import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfaffine.errors import EmptySet, NotSimilarity
from selfaffine.linalg import make_system
from selfaffine.pseudo_norm import (
    build_pseudo_norm,
    comparability_fit,
    diam_w,
    estimate_beta,
    estimate_lambda_eps,
    in_annulus,
    read_grid_cache,
    reduce_to_annulus,
    sample_annulus,
)

coords = st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: abs(v) > 1e-6)


def test_exact_variant_is_euclidean(cantor):
    w = build_pseudo_norm(cantor, "exact")
    assert w(3.0) == pytest.approx(3.0) and w(-0.5) == 0.5 and w(0.0) == 0.0


def test_exact_rejects_non_similarity(product):
    with pytest.raises(NotSimilarity):
        build_pseudo_norm(product, "exact")


def test_exact_accepts_rotation_similarity(twin_dragon):
    w = build_pseudo_norm(twin_dragon, "exact")
    assert w([3.0, 4.0]) == pytest.approx(5.0)


@pytest.mark.parametrize("variant", ["step", "mollified"])
def test_homogeneity_and_symmetry(product, product_mollified, variant):
    w = product_mollified if variant == "mollified" else build_pseudo_norm(product, "step")
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3000, 2)) * np.exp(rng.uniform(-4, 4, (3000, 1)))
    Ax = x @ product.A.entries.T
    wx, wAx = w(x), w(Ax)
    assert np.all(np.abs(wAx - math.sqrt(6) * wx) <= 1e-9 * wAx)
    assert np.array_equal(w(-x), wx)


def test_annulus_bounds(product_mollified):
    w = product_mollified
    ys = sample_annulus(w.norm_ref, 5000, np.random.default_rng(6))
    assert np.all(in_annulus(w.norm_ref, ys))
    v = w(ys)
    assert np.all(v >= w.alpha - 1e-12) and np.all(v <= w.upper_on_V)


@settings(max_examples=40, deadline=None)
@given(st.lists(coords, min_size=2, max_size=2))
def test_reduce_lands_in_annulus(v):
    sys = make_system([[2, 1], [0, 3]], [[0, 0], [1, 0], [0, 1]])
    y, k = reduce_to_annulus(sys.norm, np.array([v], dtype=float))
    assert in_annulus(sys.norm, y)[0]
    back = y[0] @ np.linalg.matrix_power(sys.A.inverse if k[0] >= 0 else sys.A.entries, abs(int(k[0]))).T
    assert np.allclose(back, v, rtol=1e-9)


def test_step_values(product):
    w = build_pseudo_norm(product, "step")
    ys = sample_annulus(product.norm, 100, np.random.default_rng(0))
    assert np.allclose(w(ys), 1.0)
    assert np.allclose(w(ys @ product.A.entries.T), math.sqrt(6))


def test_comparability_fit(product_mollified):
    fit = comparability_fit(product_mollified, 0.1, samples=5000)
    assert fit.C <= 1e3 and fit.violations == 0
    assert fit.exponent_lo < fit.exponent_hi


def test_beta_and_lambda(product_mollified):
    assert estimate_beta(product_mollified, samples=2000) >= 1.0
    assert estimate_lambda_eps(product_mollified, 0.1, samples=2000) >= 1.0
    assert 0.1 in product_mollified.lambda_eps_table


def test_grid_cache_roundtrip(product, tmp_path):
    w1 = build_pseudo_norm(product, "mollified", cache_dir=tmp_path)
    files = list(tmp_path.glob("hgrid-*.bin"))
    assert len(files) == 1
    data = read_grid_cache(files[0])
    assert data["variant"] == "mollified" and np.array_equal(data["values"], w1.grid.values)
    w2 = build_pseudo_norm(product, "mollified", cache_dir=tmp_path)
    x = np.random.default_rng(1).standard_normal((50, 2))
    assert np.array_equal(w1(x), w2(x))


def test_box_diameter_quasi_convex(product):
    w = build_pseudo_norm(product, "step")
    lo, hi = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    d = diam_w(w, box=(lo, hi))
    assert d.lo == d.hi
    rng = np.random.default_rng(2)
    pts = lo + rng.uniform(size=(400, 2)) * (hi - lo)
    assert diam_w(w, points=pts).hi <= d.hi + 1e-12


def test_box_diameter_mollified_brackets_cloud(product_mollified):
    w = product_mollified
    lo, hi = np.array([0.0, 0.0]), np.array([0.7, 0.3])
    d = diam_w(w, box=(lo, hi))
    rng = np.random.default_rng(3)
    pts = np.vstack([lo + rng.uniform(size=(600, 2)) * (hi - lo), lo, hi, [[0.7, 0], [0, 0.3]]])
    assert diam_w(w, points=pts).hi <= d.hi
    assert d.lo <= d.hi


def test_diameter_empty(product):
    w = build_pseudo_norm(product, "step")
    with pytest.raises(EmptySet):
        diam_w(w, points=np.zeros((0, 2)))
    with pytest.raises(EmptySet):
        diam_w(w, box=([1.0, 0.0], [0.0, 0.0]))
