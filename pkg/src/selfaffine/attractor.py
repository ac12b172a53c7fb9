"""The attractor ``K``, its cylinders, and the invariant measure ``sigma``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .digits import DEFAULT_BUDGET, SpatialIndex
from .errors import BudgetExceeded, EmptySet
from .linalg import ExpandingSystem
from .rng import run_blocks, substream


@dataclass(frozen=True)
class Bracket:
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= x <= self.hi + tol

    def __iter__(self):
        return iter((self.lo, self.hi))


@dataclass(frozen=True)
class BoxWindow:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def make(cls, lo, hi) -> "BoxWindow":
        return cls(np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float)))

    @classmethod
    def centered(cls, center, side) -> "BoxWindow":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        h = np.broadcast_to(np.asarray(side, dtype=float) / 2.0, c.shape)
        return cls(c - h, c + h)


@dataclass(frozen=True, eq=False)
class BallWindow:
    """Pseudo ball ``{y : w(y - center) <= radius}`` (convex for step/exact norms)."""

    center: np.ndarray
    radius: float
    w: object

    def bounding_box(self) -> BoxWindow:
        # y = A^j v with v in V has w(y) >= q^{j/n} alpha, so w(y) <= r forces
        # j <= n ln(r/alpha) / ln q and y lies in A^{j+1} B_1
        w = self.w
        n, q = w.n, w.q
        if self.radius <= 0:
            return BoxWindow(self.center.copy(), self.center.copy())
        k = math.floor(math.log(self.radius / w.alpha) * n / math.log(q)) + 1
        k = max(k, -200)
        # A^k B_1 in the adapted norm; |<e_i, A^k u>| <= ||(A^k)^T e_i|| for ||u||' <= 1
        Ak = np.linalg.matrix_power(w.matrix.entries if k >= 0 else w.matrix.inverse, abs(k))
        half = np.linalg.norm(Ak, axis=1)
        return BoxWindow(self.center - half, self.center + half)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.w(pts - self.center)) <= self.radius


# --------------------------------------------------------------------------
# geometry of K


def root_box(sys: ExpandingSystem, max_terms: int = 4000) -> tuple[np.ndarray, np.ndarray]:
    """Axis box containing ``K``.

    Per axis the extent of ``K`` is the support-function series
    ``sum_{j>=1} max_d <e, A^{-j} d>``, summed until terms vanish in double
    precision, plus a tail bound from the adapted norm.
    """
    n = sys.n
    inv = sys.A.inverse
    B = np.eye(n)
    hi_terms: list[np.ndarray] = []
    lo_terms: list[np.ndarray] = []
    scale = 0.0
    for j in range(1, max_terms + 1):
        B = B @ inv
        vals = sys.digits @ B.T
        hi_terms.append(vals.max(axis=0))
        lo_terms.append(vals.min(axis=0))
        scale = max(scale, float(np.max(np.abs(vals))))
        if j > 8 and np.max(np.abs(vals)) <= 1e-25 * scale:
            break
    hi = np.array([math.fsum(t[i] for t in hi_terms) for i in range(n)])
    lo = np.array([math.fsum(t[i] for t in lo_terms) for i in range(n)])
    J = len(hi_terms)
    dmax = float(np.max(np.linalg.norm(sys.digits, axis=1)))
    # sum_{i>J} ||A^{-i}|| <= ||A^{-J}|| sum_{l>=1} ||A^{-l}||
    tail = dmax * sys.A.op_norm(-J) * sys.norm.euclid_inverse_series()
    # each term carries a rounding error of a few ulps of its magnitude
    tail = tail + 4 * J * np.finfo(float).eps * scale
    return lo - tail, hi + tail


def hull_radius(sys: ExpandingSystem) -> float:
    """``R_K = max_d ||d||' * sum_{j>=1} ||A^{-j}||'_op``; ``K`` lies in the ``R_K`` ball."""
    dmax = float(np.max(sys.norm(sys.digits)))
    return dmax * sys.norm.inverse_series_bound(1)


def truncation_depth(sys: ExpandingSystem, eps: float) -> int:
    R = hull_radius(sys)
    J = 0
    while sys.norm.inverse_power_bound(J) * R > eps:
        J += 1
        if J > 10_000:
            raise BudgetExceeded("truncation depth did not converge")
    return J


@dataclass(frozen=True, eq=False)
class AttractorCloud:
    M: int
    points: np.ndarray
    err_radius: float


def _inverse_power(sys: ExpandingSystem, M: int) -> np.ndarray:
    return np.linalg.matrix_power(sys.A.inverse, M)


def _exact_scaled_words(sys: ExpandingSystem, M: int) -> np.ndarray:
    """Integers ``sum_{j=1}^M A^{M-j} d_j`` (times digit scale), word order ``d_1`` slowest."""
    Ai = sys.int_matrix
    pts = np.zeros((1, sys.n), dtype=np.int64)
    for _ in range(M):
        # p -> A p + d for each digit: word order has the earliest digit most significant
        pts = (pts @ Ai.T)[:, None, :] + sys.int_digits[None, :, :]
        pts = pts.reshape(-1, sys.n)
        if np.max(np.abs(pts)) >= 2**62:
            raise BudgetExceeded("integer overflow in attractor cloud")
    return pts


def attractor_cloud(sys: ExpandingSystem, M: int, budget: int = DEFAULT_BUDGET) -> AttractorCloud:
    """One point ``sum_{j=1}^M A^{-j} d_j`` per word of length ``M``.

    ``err_radius`` bounds the Hausdorff distance between the cloud and ``K``.
    """
    if sys.N**M > budget:
        raise BudgetExceeded(f"N^M = {sys.N}^{M} exceeds point budget {budget}")
    R = hull_radius(sys)
    err = sys.norm.inverse_power_bound(M) * R
    if M == 0:
        return AttractorCloud(0, np.zeros((1, sys.n)), err)
    if sys.exact:
        p = _exact_scaled_words(sys, M).astype(float) / sys.digit_scale
        A = sys.A.entries
        if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
            pts = p / np.diag(A) ** M
        else:
            pts = np.linalg.solve(np.linalg.matrix_power(A, M), p.T).T
    else:
        pts = np.zeros((1, sys.n))
        inv = sys.A.inverse
        for _ in range(M):
            # x -> A^{-1}(x + d): the last map applied is the outermost digit
            pts = ((pts[None, :, :] + sys.digits[:, None, :]) @ inv.T).reshape(-1, sys.n)
    return AttractorCloud(M, pts, err)


def chaos_game(sys: ExpandingSystem, count: int, J: int | None = None, seed: int = 0,
               eps_trunc: float = 1e-12, workers: int = 1, stream: int = 0) -> np.ndarray:
    """I.i.d. samples ``sum_{j=1}^J A^{-j} d_j`` with uniform digits.

    Each sample lies within ``eps_trunc`` of a ``sigma``-distributed point.
    Output depends only on ``(seed, stream, count, J)``.
    """
    if J is None:
        J = truncation_depth(sys, eps_trunc)
    inv = sys.A.inverse
    D = sys.digits
    N = sys.N

    def block(b: int, size: int) -> np.ndarray:
        rng = substream(seed, stream, b)
        idx = rng.integers(0, N, size=(size, J))
        x = np.zeros((size, sys.n))
        for j in range(J - 1, -1, -1):
            x = (x + D[idx[:, j]]) @ inv.T
        return x

    return run_blocks(count, block, workers=workers)


# --------------------------------------------------------------------------
# cylinders and sigma brackets


@dataclass(eq=False)
class CylinderDecomposition:
    """Axis boxes of all depth-``M`` cylinders ``K_i`` (each of mass ``N^{-M}``).

    Every box has the same shape: ``centers[i] + offset +/- half``.
    """

    M: int
    N: int
    centers: np.ndarray
    offset: np.ndarray
    half: np.ndarray
    root: tuple[np.ndarray, np.ndarray]
    tol: float
    _index: SpatialIndex | None = field(default=None, repr=False)

    @property
    def mass(self) -> float:
        return float(self.N) ** (-self.M)

    @property
    def box_lo(self) -> np.ndarray:
        return self.centers + self.offset - self.half

    @property
    def box_hi(self) -> np.ndarray:
        return self.centers + self.offset + self.half

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.centers + self.offset)
        return self._index


def cylinders(sys: ExpandingSystem, M: int, budget: int = DEFAULT_BUDGET) -> CylinderDecomposition:
    lo, hi = root_box(sys)
    cloud = attractor_cloud(sys, M, budget)
    B = _inverse_power(sys, M)
    c = (lo + hi) / 2.0
    h = (hi - lo) / 2.0
    return CylinderDecomposition(
        M=M, N=sys.N, centers=cloud.points, offset=B @ c, half=np.abs(B) @ h,
        root=(lo, hi), tol=sys.tau,
    )


def sigma_bracket(sys: ExpandingSystem, window, M: int | None = None,
                  decomposition: CylinderDecomposition | None = None,
                  budget: int = DEFAULT_BUDGET) -> Bracket:
    """Bracket ``sigma(window)`` by counting depth-``M`` cylinder boxes.

    ``lo`` counts boxes inside the window, ``hi`` boxes meeting it.  Boxes
    within ``tau`` of the window boundary count as meeting it (and, for
    the inside test, as inside).
    """
    cyl = decomposition if decomposition is not None else cylinders(sys, M, budget)
    lo_c, hi_c = sigma_counts(cyl, [window])
    return Bracket(float(lo_c[0]) * cyl.mass, float(hi_c[0]) * cyl.mass)


def sigma_counts(cyl: CylinderDecomposition, windows) -> tuple[np.ndarray, np.ndarray]:
    """Inside / meeting cylinder counts for a list of windows."""
    boxes = [w for w in windows if isinstance(w, BoxWindow)]
    lo_out = np.zeros(len(windows), dtype=np.int64)
    hi_out = np.zeros(len(windows), dtype=np.int64)
    if boxes:
        wl = np.array([w.lo for w in boxes])
        wh = np.array([w.hi for w in boxes])
        tol = cyl.tol * np.maximum(1.0, np.max(np.abs(np.concatenate([wl, wh], axis=1)), axis=1))[:, None]
        in_lo = wl + cyl.half - tol
        in_hi = wh - cyl.half + tol
        ok = np.all(in_lo <= in_hi, axis=1)
        inside = np.zeros(len(boxes), dtype=np.int64)
        if np.any(ok):
            inside[ok] = cyl.index.count_box(in_lo[ok], in_hi[ok])
        meet = cyl.index.count_box(wl - cyl.half - tol, wh + cyl.half + tol)
        pos = [i for i, w in enumerate(windows) if isinstance(w, BoxWindow)]
        lo_out[pos] = inside
        hi_out[pos] = meet
    for i, w in enumerate(windows):
        if isinstance(w, BallWindow):
            bb = w.bounding_box()
            centers = cyl.centers + cyl.offset
            near = np.all((centers >= bb.lo - cyl.half) & (centers <= bb.hi + cyl.half), axis=1)
            hi_out[i] = int(np.sum(near))
            if np.any(near):
                cand = centers[near]
                verts = np.array([np.where(np.array(c), 1.0, -1.0)
                                  for c in np.ndindex(*([2] * cyl.centers.shape[1]))])
                allin = np.ones(len(cand), dtype=bool)
                for v in verts:
                    allin &= w.contains(cand + v * cyl.half)
                lo_out[i] = int(np.sum(allin))
    return lo_out, hi_out


def _box_tol(cyl: CylinderDecomposition, lo: np.ndarray, hi: np.ndarray) -> float:
    return cyl.tol * max(1.0, float(np.max(np.abs(np.concatenate([lo, hi])))))


def sigma_refined(sys: ExpandingSystem, cyl: CylinderDecomposition, windows: list[BoxWindow],
                  extra: int = 4, max_boundary: int = 2_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Mass brackets for box windows with boundary cylinders refined adaptively.

    Depth-``M`` cylinders inside the window count toward both ends; those
    that only meet it are split into their ``N`` children, for up to
    ``extra`` more levels or until ``max_boundary`` boxes are pending.
    Returns ``(lo, hi)`` masses.
    """
    lo_out = np.zeros(len(windows))
    hi_out = np.zeros(len(windows))
    inv = sys.A.inverse
    c_root = (cyl.root[0] + cyl.root[1]) / 2.0
    h_root = (cyl.root[1] - cyl.root[0]) / 2.0
    pts_all = cyl.centers
    for i, win in enumerate(windows):
        wl, wh = win.lo, win.hi
        tol = _box_tol(cyl, wl, wh)
        pts = pts_all
        B = np.linalg.matrix_power(inv, cyl.M)
        depth = cyl.M
        inside_mass = 0.0
        while True:
            off, half = B @ c_root, np.abs(B) @ h_root
            ctr = pts + off
            meet = np.all((ctr + half >= wl - tol) & (ctr - half <= wh + tol), axis=1)
            inside = meet & np.all((ctr - half >= wl - tol) & (ctr + half <= wh + tol), axis=1)
            mass = float(cyl.N) ** (-depth)
            inside_mass += np.count_nonzero(inside) * mass
            edge = pts[meet & ~inside]
            if depth - cyl.M >= extra or len(edge) == 0 or len(edge) * cyl.N > max_boundary:
                lo_out[i] = inside_mass
                hi_out[i] = inside_mass + len(edge) * mass
                break
            B = B @ inv
            depth += 1
            pts = (edge[None, :, :] + (sys.digits @ B.T)[:, None, :]).reshape(-1, sys.n)
    return lo_out, hi_out


# --------------------------------------------------------------------------
# distances


def _directed(w, P: np.ndarray, Q: np.ndarray, knn: int) -> float:
    if getattr(w, "variant", None) == "exact":
        d, _ = cKDTree(Q).query(P, k=1)
        return float(np.max(d))
    if len(P) * len(Q) <= 4_000_000:
        best = 0.0
        chunk = max(1, 2_000_000 // len(Q))
        for a in range(0, len(P), chunk):
            diff = P[a : a + chunk, None, :] - Q[None, :, :]
            vals = np.asarray(w(diff.reshape(-1, P.shape[1]))).reshape(diff.shape[:2])
            best = max(best, float(np.max(np.min(vals, axis=1))))
        return best
    k = min(knn, len(Q))
    _, idx = cKDTree(Q).query(P, k=k)
    idx = idx.reshape(len(P), k)
    diff = P[:, None, :] - Q[idx]
    vals = np.asarray(w(diff.reshape(-1, P.shape[1]))).reshape(len(P), k)
    return float(np.max(np.min(vals, axis=1)))


def pseudo_hausdorff_distance(w, P, Q, knn: int = 16) -> float:
    """Hausdorff distance between two clouds measured with ``w``.

    Exact for the similarity variant and for clouds with at most 4e6 pairs;
    larger clouds restrict each minimum to ``knn`` Euclidean neighbours.
    """
    n = w.n
    P = np.asarray(P, dtype=float).reshape(-1, n)
    Q = np.asarray(Q, dtype=float).reshape(-1, n)
    if len(P) == 0 or len(Q) == 0:
        raise EmptySet("empty cloud")
    return max(_directed(w, P, Q, knn), _directed(w, Q, P, knn))
