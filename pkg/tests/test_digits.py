import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfaffine.digits import (
    SpatialIndex,
    collision_amplify,
    decide_osc,
    enumerate_DM,
    iter_DM,
    min_separation,
    nondiscrete_vector_gen,
    read_expansion_cache,
    word_value,
    write_expansion_cache,
)
from selfaffine.errors import BudgetExceeded, StateBudgetExceeded
from selfaffine.linalg import make_system


def brute_DM(sys, M):
    """Multiset of sum_j A^j d_j by exhaustive word enumeration."""
    A = sys.int_matrix
    out = {}
    for word in itertools.product(range(sys.N), repeat=M):
        v = np.zeros(sys.n, dtype=np.int64)
        P = np.eye(sys.n, dtype=np.int64)
        for d in word:
            v = v + P @ sys.int_digits[d]
            P = A @ P
        out[tuple(v)] = out.get(tuple(v), 0) + 1
    return out


def as_dict(eset):
    return {tuple(p): int(w) for p, w in zip(eset.points.tolist(), eset.weights)}


def test_collision_depth_two(collision):
    e = enumerate_DM(collision, 2)
    assert sorted(p[0] for p in e.points.tolist()) == [0, 1, 3, 4, 6, 9, 10, 12]
    assert as_dict(e)[(3,)] == 2 and e.total == 9


def test_binary(interval):
    e = enumerate_DM(interval, 3)
    assert sorted(e.points[:, 0].tolist()) == list(range(8)) and np.all(e.weights == 1)


@pytest.mark.parametrize("name", ["cantor", "collision", "product", "twin_dragon"])
def test_matches_brute_force(request, name):
    sys = request.getfixturevalue(name)
    M = 4 if sys.N <= 3 else 3
    assert as_dict(enumerate_DM(sys, M)) == brute_DM(sys, M)
    assert as_dict(enumerate_DM(sys, 1)) == {tuple(d): 1 for d in sys.int_digits.tolist()}


def test_incremental_counts(collision):
    prev = None
    for e in iter_DM(collision, 6):
        assert e.total == collision.N ** e.M
        if prev is not None:
            assert e.distinct <= collision.N * prev.distinct
        prev = e


def test_budget(cantor):
    with pytest.raises(BudgetExceeded):
        enumerate_DM(cantor, 20, budget=1000)


def test_min_separation_examples(cantor, collision):
    assert min_separation(enumerate_DM(make_system([[2]], [[0], [3]]), 4)) == 3
    assert min_separation(enumerate_DM(cantor, 3)) == 2
    assert min_separation(enumerate_DM(collision, 2)) == 0


def test_min_separation_nonincreasing(twin_dragon):
    seps = [min_separation(e) for e in iter_DM(twin_dragon, 8)]
    assert all(a >= b for a, b in zip(seps, seps[1:]))


def test_osc_fails_with_witness(collision):
    v = decide_osc(collision)
    assert v.status == "Fails" and v.witness.depth == 2
    assert v.witness.replay(collision)
    assert word_value(collision, v.witness.word_a) == word_value(collision, v.witness.word_b)


@pytest.mark.parametrize("name", ["interval", "cantor", "product", "twin_dragon"])
def test_osc_holds_consistent_with_enumeration(request, name):
    sys = request.getfixturevalue(name)
    v = decide_osc(sys)
    assert v.status == "Holds" and v.discreteness_delta == 1.0
    for e in iter_DM(sys, 6):
        assert np.all(e.weights == 1)


def test_product_cross_check(product):
    axes = [make_system([[2]], [[0], [1]]), make_system([[3]], [[0], [1], [2]])]
    assert all(decide_osc(s).status == "Holds" for s in axes)
    assert decide_osc(product).status == "Holds"


def test_state_budget(product):
    with pytest.raises(StateBudgetExceeded):
        decide_osc(product, state_budget=1)


def test_float_mode_never_holds():
    sys = make_system([[2.0]], [[0.0], [1.0]], mode="float")
    v = decide_osc(sys, max_depth=8)
    assert v.status == "Unknown" and v.discreteness_delta == pytest.approx(1.0)
    bad = make_system([[3.0]], [[0.0], [1.0], [3.0]], mode="float")
    assert decide_osc(bad, max_depth=4).status == "Fails"


def test_amplification(collision):
    wit = decide_osc(collision).witness
    a1 = collision_amplify(collision, wit, 1)
    assert a1.point == (3,) and a1.multiplicity_bound == 2 and a1.verified
    a3 = collision_amplify(collision, wit, 3)
    assert a3.point == (273,) and a3.multiplicity_bound == 8
    assert a3.verified and a3.observed_weight >= 8
    a0 = collision_amplify(collision, wit, 0)
    assert a0.multiplicity_bound == 1


def test_nondiscrete_generator():
    plain = nondiscrete_vector_gen(0)
    assert min_separation(enumerate_DM(plain, 8)) == pytest.approx(1.0)
    sys = nondiscrete_vector_gen(10)
    e = enumerate_DM(sys, 11)
    assert e.distinct == sys.N ** 11
    assert 0 < min_separation(e) < 2.0**-9


def test_expansion_cache_roundtrip(collision, tmp_path):
    e = enumerate_DM(collision, 4)
    path = tmp_path / "d.csv"
    write_expansion_cache(path, collision, e)
    back = read_expansion_cache(path)
    assert as_dict(back) == as_dict(e) and back.M == 4 and back.mode == e.mode


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lattice_table_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    ipts = rng.integers(-20, 20, size=(300, 2))
    ipts = np.unique(ipts, axis=0)
    weights = rng.integers(1, 4, size=len(ipts))
    scale = int(rng.integers(1, 4))
    pts = ipts / scale
    table = SpatialIndex(pts, weights, lattice=(ipts, scale))
    tree = SpatialIndex(pts, weights)
    assert table._table is not None
    lo = rng.uniform(-8, 6, size=(40, 2))
    hi = lo + rng.uniform(0, 6, size=(40, 2))
    # include boxes whose faces sit exactly on lattice points
    lo[:10] = np.round(lo[:10] * scale) / scale
    hi[:10] = np.round(hi[:10] * scale) / scale
    brute = [weights[np.all((pts >= l) & (pts <= h), axis=1)].sum() for l, h in zip(lo, hi)]
    assert table.count_box(lo, hi).tolist() == brute
    assert tree.count_box(lo, hi).tolist() == brute


def test_interval_counts():
    pts = np.array([[0.0], [1.0], [1.0 + 1e-15], [3.0]])
    idx = SpatialIndex(pts, np.array([1, 2, 3, 4]))
    assert idx.count_box(np.array([[1.0]]), np.array([[3.0]])).tolist() == [9]
