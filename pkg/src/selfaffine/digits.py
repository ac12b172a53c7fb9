"""Digit expansions ``sum_{j<M} A^j d_j`` and the open set condition.

The OSC holds exactly when all ``N^M`` expansions of every depth are
distinct and their union is uniformly discrete.  For integer systems the
second half is automatic, and distinctness is decided by a finite
reachability search over differences of partial expansions.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BudgetExceeded, InvalidWitness, StateBudgetExceeded
from .linalg import ExpandingSystem, make_system

DEFAULT_BUDGET = 10**7
_INT_LIMIT = 2**62


# --------------------------------------------------------------------------
# spatial index


class SpatialIndex:
    """Weighted range counting over a fixed point set.

    One dimension uses sorted coordinates with prefix sums; higher
    dimensions use a k-d tree on coordinates rescaled per query shape.
    """

    def __init__(self, points: np.ndarray, weights: np.ndarray | None = None,
                 lattice: tuple[np.ndarray, int] | None = None, max_cells: int = 2**23):
        self.points = np.asarray(points, dtype=float).reshape(len(points), -1)
        self.weights = (np.ones(len(self.points), dtype=np.int64)
                        if weights is None else np.asarray(weights))
        self.n = self.points.shape[1]
        self._unit = bool(np.all(self.weights == 1))
        self._table = None
        if lattice is not None and self.n > 1:
            self._build_table(*lattice, max_cells)
        if self.n == 1:
            order = np.argsort(self.points[:, 0], kind="stable")
            self.sorted = self.points[order, 0]
            self.cum = np.concatenate([[0], np.cumsum(self.weights[order])])
        self._trees: dict = {}

    def _build_table(self, ipts: np.ndarray, scale: int, max_cells: int) -> None:
        """Summed-area table over the integer bounding box, when it is small enough."""
        ipts = np.asarray(ipts, dtype=np.int64)
        base = ipts.min(axis=0)
        dims = ipts.max(axis=0) - base + 1
        if float(np.prod(dims.astype(float))) > max_cells:
            return
        grid = np.zeros(tuple(int(d) + 1 for d in dims), dtype=np.int64)
        np.add.at(grid, tuple((ipts - base + 1).T), self.weights)
        for ax in range(self.n):
            np.cumsum(grid, axis=ax, out=grid)
        self._table = (grid, base, dims, int(scale))

    def _count_table(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        grid, base, dims, scale = self._table
        # closed box -> integer index range, with slack against rounding of the bounds
        ls, hs = lo * scale, hi * scale
        a = np.ceil(ls - 1e-9 * np.maximum(1.0, np.abs(ls))).astype(np.int64) - base
        b = np.floor(hs + 1e-9 * np.maximum(1.0, np.abs(hs))).astype(np.int64) - base
        a = np.clip(a, 0, dims)
        b = np.clip(b, -1, dims - 1)
        empty = np.any(b < a, axis=1)
        out = np.zeros(len(lo), dtype=np.int64)
        for corner in itertools.product((0, 1), repeat=self.n):
            idx = tuple(np.where(c, b[:, i] + 1, a[:, i]) for i, c in enumerate(corner))
            sign = (-1) ** (self.n - sum(corner))
            out += sign * grid[idx]
        out[empty] = 0
        return out

    def count_interval(self, lo, hi) -> np.ndarray:
        """Weighted counts in closed intervals ``[lo, hi]`` (1-D only)."""
        a = np.searchsorted(self.sorted, lo, side="left")
        b = np.searchsorted(self.sorted, hi, side="right")
        return self.cum[b] - self.cum[a]

    def count_box(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Weighted counts in closed axis boxes given by rows of ``lo`` and ``hi``."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        if self.n == 1:
            return self.count_interval(lo[:, 0], hi[:, 0])
        if self._table is not None:
            return self._count_table(lo, hi)
        out = np.zeros(len(lo), dtype=self.weights.dtype)
        half = (hi - lo) / 2.0
        center = (hi + lo) / 2.0
        shapes, inv = np.unique(np.round(half, 12), axis=0, return_inverse=True)
        for s, h in enumerate(shapes):
            sel = np.flatnonzero(inv.ravel() == s)
            # relative slack of 1e-12 per axis, as in the scaled tree query
            slack = np.where(h > 0, h, 1.0) * 1e-12
            hs = np.where(h > 0, h, 1.0)
            if len(sel) < 16 or not np.all(h > 0):
                # a tree build costs more than a few linear scans
                for i in sel:
                    inside = np.all((self.points >= lo[i] - slack) & (self.points <= hi[i] + slack), axis=1)
                    out[i] = self.weights[inside].sum()
                continue
            key = tuple(hs)
            tree = self._trees.get(key)
            if tree is None:
                tree = cKDTree(self.points / hs)
                if len(self._trees) < 8:
                    self._trees[key] = tree
            r = 1.0 + 1e-12
            if self._unit:
                out[sel] = tree.query_ball_point(center[sel] / hs, r=r, p=np.inf, return_length=True)
                continue
            hits = tree.query_ball_point(center[sel] / hs, r=r, p=np.inf)
            for i, idx in zip(sel, hits):
                out[i] = self.weights[idx].sum() if idx else 0
        return out


# --------------------------------------------------------------------------
# expansion sets


@dataclass(eq=False)
class ExpansionSet:
    """Deduplicated depth-``M`` expansions with integer multiplicities.

    In exact modes ``points`` holds integers equal to the true values times
    ``scale``; in float mode it holds the values themselves (one
    representative per ``tau``-cluster).
    """

    M: int
    points: np.ndarray
    weights: np.ndarray
    mode: str
    tau: float
    scale: int = 1
    # smallest and largest base-N word codes mapping to each point
    first_word: np.ndarray | None = field(default=None, repr=False)
    last_word: np.ndarray | None = field(default=None, repr=False)
    _index: SpatialIndex | None = field(default=None, repr=False)

    @property
    def values(self) -> np.ndarray:
        if self.mode == "float":
            return self.points
        return self.points.astype(float) / self.scale

    @property
    def total(self) -> int:
        return int(self.weights.sum())

    @property
    def distinct(self) -> int:
        return len(self.points)

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            lattice = None if self.mode == "float" else (self.points, self.scale)
            self._index = SpatialIndex(self.values, self.weights, lattice=lattice)
        return self._index


def _group(keys: np.ndarray, weights: np.ndarray, codes: np.ndarray, first: np.ndarray,
           last: np.ndarray):
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    w = np.zeros(len(uniq), dtype=np.int64)
    np.add.at(w, inv, weights)
    lo = np.full(len(uniq), np.iinfo(np.int64).max, dtype=np.int64)
    hi = np.full(len(uniq), -1, dtype=np.int64)
    np.minimum.at(lo, inv, first)
    np.maximum.at(hi, inv, last)
    return uniq, inv, w, lo, hi


def _refine(sys: ExpandingSystem, eset: ExpansionSet) -> ExpansionSet:
    """One refinement step ``D_{M+1} = D_M + A^M D``."""
    M = eset.M
    N = sys.N
    base = N**M
    if sys.exact:
        Ai = [[int(v) for v in row] for row in sys.int_matrix]
        shifts = []
        for d in sys.int_digits.tolist():
            v = d
            for _ in range(M):
                v = [sum(Ai[i][j] * v[j] for j in range(sys.n)) for i in range(sys.n)]
            shifts.append(v)
        bound = max(abs(x) for v in shifts for x in v) + (int(np.max(np.abs(eset.points))) if eset.distinct else 0)
        if bound >= _INT_LIMIT:
            raise BudgetExceeded(f"expansion values exceed int64 range at depth {M + 1}")
        shifts = np.array(shifts, dtype=np.int64)
    else:
        shifts = sys.digits @ np.linalg.matrix_power(sys.A.entries, M).T
    P = eset.points
    cand = (P[None, :, :] + shifts[:, None, :]).reshape(-1, sys.n)
    wts = np.tile(eset.weights, N)
    offs = np.repeat(np.arange(N, dtype=np.int64) * base, len(P))
    first = np.tile(eset.first_word, N) + offs
    last = np.tile(eset.last_word, N) + offs
    if sys.exact:
        uniq, inv, w, lo, hi = _group(cand, wts, None, first, last)
        pts = uniq
    else:
        scaled = np.floor(cand / sys.tau + 0.5)
        if np.any(np.abs(scaled) >= _INT_LIMIT):
            raise BudgetExceeded("tau-grid keys overflow; increase tau or reduce depth")
        keys = scaled.astype(np.int64)
        uniq, inv, w, lo, hi = _group(keys, wts, None, first, last)
        # representative: the candidate carrying the smallest word code
        order = np.lexsort((first, inv))
        starts = np.searchsorted(inv[order], np.arange(len(uniq)))
        pts = cand[order[starts]]
    return ExpansionSet(M=M + 1, points=pts, weights=w, mode=sys.mode, tau=sys.tau,
                        scale=sys.digit_scale, first_word=lo, last_word=hi)


def _root(sys: ExpandingSystem) -> ExpansionSet:
    dtype = np.int64 if sys.exact else float
    return ExpansionSet(M=0, points=np.zeros((1, sys.n), dtype=dtype),
                        weights=np.ones(1, dtype=np.int64), mode=sys.mode, tau=sys.tau,
                        scale=sys.digit_scale, first_word=np.zeros(1, dtype=np.int64),
                        last_word=np.zeros(1, dtype=np.int64))


def iter_DM(sys: ExpandingSystem, max_depth: int, budget: int = DEFAULT_BUDGET):
    """Yield ``D_1, D_2, ...`` incrementally up to ``max_depth`` or the budget."""
    eset = _root(sys)
    for M in range(1, max_depth + 1):
        if sys.N**M > budget:
            return
        eset = _refine(sys, eset)
        yield eset


def enumerate_DM(sys: ExpandingSystem, M: int, budget: int = DEFAULT_BUDGET) -> ExpansionSet:
    """All depth-``M`` expansions, deduplicated with multiplicities.

    Raises
    ------
    BudgetExceeded
        If ``N^M`` exceeds ``budget``.
    """
    if sys.N**M > budget:
        raise BudgetExceeded(f"N^M = {sys.N}^{M} exceeds point budget {budget}")
    eset = _root(sys)
    for _ in range(M):
        eset = _refine(sys, eset)
    return eset


def decode_word(code: int, N: int, M: int) -> tuple[int, ...]:
    """Base-``N`` digits ``(k_0, ..., k_{M-1})`` of a word code."""
    out = []
    for _ in range(M):
        code, r = divmod(int(code), N)
        out.append(r)
    return tuple(out)


def word_value(sys: ExpandingSystem, word, exact: bool | None = None):
    """Value ``sum_j A^j d_{word[j]}`` (integers scaled by ``digit_scale`` if exact)."""
    exact = sys.exact if exact is None else exact
    if exact:
        Ai = sys.int_matrix.tolist()
        acc = [0] * sys.n
        for k in reversed(word):
            acc = [sum(Ai[i][j] * acc[j] for j in range(sys.n)) for i in range(sys.n)]
            acc = [a + int(d) for a, d in zip(acc, sys.int_digits[k])]
        return tuple(acc)
    acc = np.zeros(sys.n)
    for k in reversed(word):
        acc = sys.A.entries @ acc + sys.digits[k]
    return acc


def min_separation(eset: ExpansionSet, norm=None, knn: int = 16) -> float:
    """Smallest distance between distinct points (0 if any weight exceeds 1).

    ``norm`` is ``None`` (Euclidean) or a :class:`PseudoNorm`.  Euclidean
    separation is exact via nearest neighbours; pseudo-norm separation is
    exact below 10^4 points and otherwise taken over the ``knn`` Euclidean
    neighbours of each point.
    """
    if np.any(eset.weights > 1):
        return 0.0
    pts = eset.values
    if len(pts) < 2:
        raise ValueError("need at least two points")
    if norm is None:
        d, _ = cKDTree(pts).query(pts, k=2)
        return float(np.min(d[:, 1]))
    if len(pts) <= 10_000:
        best = np.inf
        chunk = max(1, 1_000_000 // len(pts))
        for a in range(0, len(pts), chunk):
            diff = pts[a : a + chunk, None, :] - pts[None, :, :]
            vals = norm(diff.reshape(-1, pts.shape[1])).reshape(diff.shape[:2])
            rows = np.arange(a, min(a + chunk, len(pts)))
            vals[rows - a, rows] = np.inf
            best = min(best, float(np.min(vals)))
        return best
    k = min(knn + 1, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    diff = pts[:, None, :] - pts[idx[:, 1:]]
    return float(np.min(norm(diff.reshape(-1, pts.shape[1]))))


# --------------------------------------------------------------------------
# OSC decision


@dataclass(frozen=True)
class Witness:
    """Two distinct digit words of the same depth with equal value."""

    depth: int
    word_a: tuple[int, ...]
    word_b: tuple[int, ...]
    value: tuple

    def replay(self, sys: ExpandingSystem) -> bool:
        """Re-evaluate both words in the system's arithmetic."""
        if self.word_a == self.word_b:
            return False
        va = word_value(sys, self.word_a)
        vb = word_value(sys, self.word_b)
        if sys.exact:
            return tuple(va) == tuple(vb)
        return bool(np.max(np.abs(np.asarray(va) - np.asarray(vb))) <= sys.tau * max(1.0, float(np.max(np.abs(va)))))


@dataclass
class OscVerdict:
    status: str  # "Holds" | "Fails" | "Unknown"
    method: str
    depth_reached: int
    witness: Witness | None = None
    states: list | None = None
    discreteness_delta: float | None = None
    state_bound: float | None = None
    trend: list = field(default_factory=list)


def state_bound(sys: ExpandingSystem, diffs: np.ndarray, terms: int = 200) -> float:
    """Euclidean bound on reachable difference states.

    A state at height ``k`` equals ``-sum_{i=1}^{k} A^{-i} c_{k-i}``, so its
    norm is at most ``max ||c|| * sum_{i>=1} ||A^{-i}||``.  The series is
    summed to ``terms`` terms with a geometric tail from the adapted norm.
    """
    cmax = float(np.max(np.linalg.norm(diffs.astype(float), axis=1)))
    return cmax * sys.norm.euclid_inverse_series(terms) * (1 + 1e-9)


def _lattice_count_estimate(n: int, radius: float) -> float:
    vol = math.pi ** (n / 2) / math.gamma(n / 2 + 1) * (radius + math.sqrt(n)) ** n
    return vol


def _automaton(sys: ExpandingSystem, state_budget: int) -> OscVerdict:
    D = [tuple(d) for d in sys.int_digits.tolist()]
    pairs: dict[tuple, tuple[int, int]] = {}
    for i, a in enumerate(D):
        for j, b in enumerate(D):
            c = tuple(x - y for x, y in zip(a, b))
            pairs.setdefault(c, (i, j))
    diffs = sorted(pairs)
    bound = state_bound(sys, np.array(diffs))
    if _lattice_count_estimate(sys.n, bound) > state_budget:
        raise StateBudgetExceeded(
            f"state bound {bound:.4g} allows ~{_lattice_count_estimate(sys.n, bound):.3g} "
            f"states, above budget {state_budget}")
    Ai = sys.int_matrix.tolist()
    n = sys.n
    zero = (0,) * n
    b2 = bound * bound

    def ok(t):
        return sum(x * x for x in t) <= b2

    parent: dict[tuple, tuple | None] = {}
    via: dict[tuple, tuple] = {}
    queue = deque()
    for c in diffs:
        if c != zero and ok(c):
            parent[c] = None
            via[c] = c
            queue.append(c)
    found = None
    while queue and found is None:
        t = queue.popleft()
        At = tuple(sum(Ai[i][j] * t[j] for j in range(n)) for i in range(n))
        for c in diffs:
            nxt = tuple(x + y for x, y in zip(At, c))
            if nxt == zero:
                found = (t, c)
                break
            if nxt not in parent and ok(nxt):
                parent[nxt] = t
                via[nxt] = c
                queue.append(nxt)
                if len(parent) > state_budget:
                    raise StateBudgetExceeded(f"more than {state_budget} reachable states")
    if found is None:
        return OscVerdict(status="Holds", method="integer-automaton", depth_reached=-1,
                          states=sorted(parent), discreteness_delta=1.0 / sys.digit_scale,
                          state_bound=bound)
    # path of differences from the top digit down to c_0
    t, c_last = found
    cs = [c_last]
    while t is not None:
        cs.append(via[t])
        t = parent[t]
    cs = cs[::-1]  # top first; cs[-1] is c_0
    low_first = cs[::-1]
    word_a = tuple(pairs[c][0] for c in low_first)
    word_b = tuple(pairs[c][1] for c in low_first)
    value = word_value(sys, word_a)
    wit = Witness(depth=len(word_a), word_a=word_a, word_b=word_b, value=tuple(value))
    if not wit.replay(sys):
        raise AssertionError("automaton produced an invalid witness")
    return OscVerdict(status="Fails", method="integer-automaton", depth_reached=wit.depth,
                      witness=wit, discreteness_delta=0.0, state_bound=bound)


def decide_osc(sys: ExpandingSystem, max_depth: int = 12, budget: int = DEFAULT_BUDGET,
               state_budget: int = 10**6) -> OscVerdict:
    """Decide (integer modes) or probe (float mode) the open set condition.

    Exact modes run the difference automaton and return ``Holds`` or
    ``Fails`` with a shortest collision witness.  Float mode enumerates
    ``D_M`` up to ``max_depth`` and returns ``Fails`` on a ``tau``-collision,
    otherwise ``Unknown`` with the separation trend; it never returns
    ``Holds``.
    """
    if sys.exact:
        return _automaton(sys, state_budget)
    trend = []
    last = 0
    for eset in iter_DM(sys, max_depth, budget):
        last = eset.M
        dup = np.flatnonzero(eset.weights > 1)
        if dup.size:
            i = dup[0]
            wa = decode_word(eset.first_word[i], sys.N, eset.M)
            wb = decode_word(eset.last_word[i], sys.N, eset.M)
            wit = Witness(eset.M, wa, wb, tuple(np.asarray(word_value(sys, wa)).tolist()))
            trend.append((eset.M, eset.distinct, sys.N**eset.M, 0.0))
            return OscVerdict(status="Fails", method="float-enumeration", depth_reached=eset.M,
                              witness=wit, discreteness_delta=0.0, trend=trend)
        sep = min_separation(eset) if eset.distinct > 1 else float("inf")
        trend.append((eset.M, eset.distinct, sys.N**eset.M, sep))
    delta = min((t[3] for t in trend), default=None)
    return OscVerdict(status="Unknown", method="float-enumeration", depth_reached=last,
                      discreteness_delta=delta, trend=trend)


# --------------------------------------------------------------------------
# divergence witnesses


@dataclass(frozen=True)
class Amplification:
    fold: int
    point: tuple
    multiplicity_bound: int
    verified: bool | None
    observed_weight: int | None


def collision_amplify(sys: ExpandingSystem, witness: Witness, k: int,
                      budget: int = DEFAULT_BUDGET) -> Amplification:
    """Fold a collision ``k`` times: ``a_k = sum_{j<k} A^{Mj} a`` has at least ``2^k`` expansions.

    The bound is confirmed by enumerating ``D_{kM}`` when ``N^{kM}`` fits the
    budget; otherwise ``verified`` is ``None``.
    """
    if witness.word_a == witness.word_b or len(witness.word_a) != witness.depth \
            or not witness.replay(sys):
        raise InvalidWitness("witness words do not collide")
    if k < 0:
        raise ValueError("fold count must be >= 0")
    M = witness.depth
    if sys.exact:
        Ai = sys.int_matrix.tolist()
        a = list(witness.value)
        acc = [0] * sys.n
        for _ in range(k):
            # acc <- A^M acc + a, Horner in the fold index
            for _ in range(M):
                acc = [sum(Ai[i][j] * acc[j] for j in range(sys.n)) for i in range(sys.n)]
            acc = [x + y for x, y in zip(acc, a)]
        point = tuple(acc)
    else:
        AM = np.linalg.matrix_power(sys.A.entries, M)
        acc = np.zeros(sys.n)
        for _ in range(k):
            acc = AM @ acc + np.asarray(witness.value, dtype=float)
        point = tuple(acc.tolist())
    bound = 2**k
    verified, observed = None, None
    if k == 0:
        verified, observed = True, 1
    elif sys.N ** (k * M) <= budget:
        eset = enumerate_DM(sys, k * M, budget)
        if sys.exact:
            hit = np.flatnonzero(np.all(eset.points == np.array(point, dtype=np.int64), axis=1))
        else:
            hit = np.flatnonzero(np.all(np.abs(eset.points - np.array(point)) <= sys.tau, axis=1))
        observed = int(eset.weights[hit].sum()) if hit.size else 0
        verified = observed >= bound
    return Amplification(fold=k, point=point, multiplicity_bound=bound, verified=verified,
                         observed_weight=observed)


def nondiscrete_vector_gen(t: int, base: int = 2, irrational: float = math.sqrt(2) - 1,
                           tau: float = 1e-12) -> ExpandingSystem:
    """Float test system whose expansions contain pairs closer than ``2^-t``.

    Digits are ``{0, 1, 1 + eta}`` with ``eta = irrational * 2^-t``; ``eta``
    is not rational so (up to float resolution) no two expansions coincide,
    while differences ``(P - P') + eta (R - R')`` approach zero as depth
    grows.  ``t = 0`` returns the plain template ``{0, 1}``.
    """
    if t == 0:
        return make_system([[base]], [[0.0], [1.0]], mode="float", tau=tau)
    eta = irrational * 2.0 ** (-t)
    return make_system([[base]], [[0.0], [1.0], [1.0 + eta]], mode="float", tau=tau)


# --------------------------------------------------------------------------
# cache file


def write_expansion_cache(path: str | Path, sys: ExpandingSystem, eset: ExpansionSet) -> None:
    """Header lines then one ``x1,...,xn,weight`` record per point, lexicographically sorted."""
    order = np.lexsort(eset.points.T[::-1])
    lines = [
        "# expansion-set v1",
        f"# A = {sys.A.entries.tolist()!r}",
        f"# D = {sys.digits.tolist()!r}",
        f"# M = {eset.M}",
        f"# mode = {eset.mode}",
        f"# tau = {eset.tau!r}",
        f"# scale = {eset.scale}",
    ]
    for i in order:
        p = eset.points[i]
        coords = [str(int(v)) for v in p] if eset.mode != "float" else [repr(float(v)) for v in p]
        lines.append(",".join(coords + [str(int(eset.weights[i]))]))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_expansion_cache(path: str | Path) -> ExpansionSet:
    head = {}
    rows = []
    for ln in Path(path).read_text().splitlines():
        if ln.startswith("#"):
            if "=" in ln:
                k, v = ln[1:].split("=", 1)
                head[k.strip()] = v.strip()
        elif ln:
            rows.append(ln.split(","))
    mode = head["mode"]
    if mode == "float":
        pts = np.array([[float(v) for v in r[:-1]] for r in rows])
    else:
        pts = np.array([[int(v) for v in r[:-1]] for r in rows], dtype=np.int64)
    w = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return ExpansionSet(M=int(head["M"]), points=pts, weights=w, mode=mode,
                        tau=float(head["tau"]), scale=int(head["scale"]))
