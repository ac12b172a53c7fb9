"""Upper densities of expansion measures and pseudo Hausdorff measure brackets.

The counting measure ``mu`` on the expansion set ``D_M`` (with
multiplicities) has upper density ``E = lim_{r->inf} sup_{diam_w U >= r}
mu(U) / (diam_w U)^s`` over convex ``U``, and the pseudo Hausdorff measure
of the attractor is ``1 / E``.  Window sweeps here score each window ``U``
by ``mu(U) / diam_w(U + K)^s`` where ``K`` is replaced by its root box.
Since ``(mu * sigma)(U + K) >= mu(U)`` and ``mu * sigma`` has the same upper
density as ``mu``, every score is a lower bound of a convex-window ratio
of ``mu * sigma``, and the finite-depth bias of plain point counts
(``(L + 1) / L`` for ``L + 1`` integers) disappears.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .attractor import (
    BallWindow,
    Bracket,
    BoxWindow,
    CylinderDecomposition,
    attractor_cloud,
    chaos_game,
    cylinders,
    root_box,
    sigma_refined,
)
from .digits import (
    DEFAULT_BUDGET,
    ExpansionSet,
    OscVerdict,
    collision_amplify,
    decide_osc,
    enumerate_DM,
)
from .errors import BudgetExceeded, PointNotOnAttractor
from .linalg import ExpandingSystem
from .pseudo_norm import PseudoNorm, box_vertices, diam_w
from .rng import substream

FAMILIES = ("boxes", "balls", "both")
SWEEP_CAP = 2**18
SIGMA_CAP = 2**16
STEP_SLACK = 1e-12


def default_depth(sys: ExpandingSystem, cap: int = SWEEP_CAP) -> int:
    """Largest ``M`` with ``N^M <= cap``."""
    M = 0
    while sys.N ** (M + 1) <= cap:
        M += 1
    return max(M, 1)


class BoxDiameters:
    """Upper and lower ``w``-diameters of axis boxes, keyed by side vector.

    Quasi-convex gauges are exact and vectorised over the ``2^{n-1}``
    vertex directions of the difference box; the mollified gauge goes
    through :func:`diam_w` once per distinct shape.
    """

    def __init__(self, w: PseudoNorm, resolution: int = 401):
        self.w = w
        self.resolution = resolution
        n = w.n
        signs = box_vertices(-np.ones(n), np.ones(n))
        self._signs = signs[signs[:, 0] > 0]
        self._cache: dict[tuple, tuple[float, float]] = {}

    def _bracket(self, sides: np.ndarray) -> np.ndarray:
        sides = np.atleast_2d(np.asarray(sides, dtype=float))
        if self.w.quasi_convex:
            dirs = (sides[:, None, :] * self._signs[None, :, :]).reshape(-1, self.w.n)
            if self.w.smooth:
                v = np.asarray(self.w(dirs)).reshape(len(sides), -1).max(axis=1)
                return np.stack([v, v], axis=1)
            # the step gauge jumps on annulus boundaries, where a vertex may sit
            # exactly; rounding decides the level, so bracket both sides of it
            both = np.asarray(self.w(np.concatenate([dirs * (1 - STEP_SLACK), dirs * (1 + STEP_SLACK)])))
            lo, hi = both.reshape(2, len(sides), -1).max(axis=2)
            return np.stack([lo, hi], axis=1)
        out = np.empty((len(sides), 2))
        for i, side in enumerate(sides):
            key = tuple(np.round(side, 12))
            hit = self._cache.get(key)
            if hit is None:
                d = diam_w(self.w, box=(np.zeros_like(side), side), resolution=self.resolution)
                hit = (d.lo, d.hi)
                self._cache[key] = hit
            out[i] = hit
        return out

    def hi(self, sides) -> np.ndarray:
        return self._bracket(sides)[:, 1]

    def lo(self, sides) -> np.ndarray:
        return self._bracket(sides)[:, 0]


# --------------------------------------------------------------------------
# density sweep


@dataclass(frozen=True)
class ScaleRow:
    scale: float
    family: str
    windows_swept: int
    sup_ratio: float


@dataclass(eq=False)
class DensityEstimate:
    """Per-scale window suprema of ``mu(U) / diam_w(U + K)^s``.

    ``schedule`` holds ascending scale edges; ``per_scale[i]`` is the sup
    over windows whose diameter falls in ``[schedule[i], schedule[i+1])``
    (the last bin is open) and ``suffix[i]`` the sup over all windows with
    diameter at least ``schedule[i]``.  ``best`` is the sup over windows of
    diameter at least ``top / q^{2/n}``, the last two self-replication
    periods; ``drift`` compares it against the last period alone.
    """

    s: float
    M: int
    family: str
    schedule: np.ndarray
    rows: list[ScaleRow]
    per_scale: np.ndarray
    suffix: np.ndarray
    best: float
    top: float
    drift: float
    windows_swept: int
    # (ratio, lo, hi) of the strongest windows above top / q^{2/n}, in D_M coordinates
    best_windows: list = field(default_factory=list)
    amplification: dict | None = None

    def sup_above(self, r: float) -> float:
        i = int(np.searchsorted(self.schedule, r, side="left"))
        return float(self.suffix[i]) if i < len(self.suffix) else 0.0


def _count_schedule(P: int) -> np.ndarray:
    small = np.arange(1, min(P, 64) + 1)
    if P <= 64:
        return small
    geo = np.round(2.0 ** (np.arange(6 * 8, int(math.log2(P) * 8) + 1) / 8.0)).astype(np.int64)
    return np.unique(np.concatenate([small, geo, [P]]))


def _top_windows(d, r, lo, hi, cut: float, k: int = 8) -> list:
    """The ``k`` best ``(ratio, lo, hi)`` among windows of diameter ``>= cut``."""
    idx = np.flatnonzero(d >= cut)
    if idx.size == 0:
        return []
    idx = idx[np.argsort(-r[idx], kind="stable")[:k]]
    return [(float(r[i]), np.atleast_1d(lo[i]).astype(float), np.atleast_1d(hi[i]).astype(float))
            for i in idx]


def _sweep_intervals(v: np.ndarray, m: np.ndarray, w: PseudoNorm, s: float, side_K: float,
                     lengths: np.ndarray, cut: float):
    """1-D quasi-convex sweep over intervals with endpoints at data points."""
    order = np.argsort(v, kind="stable")
    v, m = v[order], m[order]
    cw = np.concatenate([[0], np.cumsum(m)])
    P = len(v)
    ds, rs, top = [], [], []

    def score(start, L, mass):
        d = np.asarray(w((L + side_K)[:, None]), dtype=float)
        r = mass.astype(float) / d**s
        ds.append(d)
        rs.append(r)
        top.extend(_top_windows(d, r, v[start], v[start] + L, cut))

    for c in _count_schedule(P):
        score(np.arange(P - c + 1), v[c - 1 :] - v[: P - c + 1], cw[c:] - cw[: P - c + 1])
    for L in lengths:
        b = np.searchsorted(v, v + L, side="right")
        score(np.arange(P), v[b - 1] - v, cw[b] - cw[:P])
    return np.concatenate(ds), np.concatenate(rs), top


def _center_sample(points: np.ndarray, max_centers: int) -> np.ndarray:
    P = len(points)
    if P <= max_centers:
        return np.arange(P)
    return np.unique(np.linspace(0, P - 1, max_centers).round().astype(np.int64))


def _box_shapes(A: np.ndarray, side_K: np.ndarray, M: int, factors, top_factors) -> np.ndarray:
    """Bounding shapes of ``A^k K`` stretched per axis, minus the root box.

    The last three levels, which decide the best estimate, use the denser
    ``top_factors``.
    """
    n = len(side_K)
    floor = 1e-9 * max(float(np.max(side_K)), 1.0)
    shapes = []
    Ak = np.eye(n)
    for k in range(M + 1):
        G = np.abs(Ak) @ side_K
        for f in itertools.product(top_factors if k >= M - 2 else factors, repeat=n):
            shapes.append(np.maximum(G * np.array(f) - side_K, floor))
        Ak = Ak @ A
    return np.unique(np.round(np.array(shapes), 12), axis=0)


def _sweep_boxes(eset: ExpansionSet, s: float, side_K: np.ndarray, shapes: np.ndarray,
                 centers: np.ndarray, diams: BoxDiameters, workers: int, cut: float,
                 work_per_shape: float = 4e6):
    index = eset.index
    C_all = eset.values[centers]
    brackets = diams._bracket(shapes + side_K)
    d_eff, d_low = brackets[:, 1], brackets[:, 0]
    span = eset.values.max(axis=0) - eset.values.min(axis=0) + side_K
    P = eset.distinct

    def one(i: int):
        side = shapes[i]
        # counting visits every point in a window, so large windows get fewer centres
        frac = float(np.prod(np.minimum((side + side_K) / span, 1.0)))
        keep = max(32, int(work_per_shape / (3.0 * max(P * frac, 1.0))))
        C = C_all[_center_sample(C_all, keep)]
        lo = np.concatenate([C - a * side for a in (0.0, 0.5, 1.0)])
        counts = index.count_box(lo, lo + side).astype(float)
        d = np.full(len(lo), d_eff[i])
        r = counts / d_eff[i] ** s
        tops = _top_windows(d, r, lo, lo + side, cut)
        if d_low[i] < d_eff[i]:
            # candidates for the lower bound, ranked by the optimistic diameter
            tops += _top_windows(d, counts / d_low[i] ** s, lo, lo + side, cut, k=2)
        return d, r, tops

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(one, range(len(shapes))))
    else:
        parts = [one(i) for i in range(len(shapes))]
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
            [t for p in parts for t in p[2]])


def _sweep_balls(eset: ExpansionSet, w: PseudoNorm, s: float, side_K: np.ndarray, M: int,
                 centers: np.ndarray, diams: BoxDiameters, eval_budget: int, cut: float):
    pts = eset.values
    wts = eset.weights.astype(float)
    diam_K = float(diams.hi(side_K[None, :])[0])
    radii = [diam_K * w.q ** (k / w.n) * f / 2.0 for k in range(M + 1) for f in (1.0, math.sqrt(2))]
    used = 0
    out_d, out_r, box_lo, box_hi = [], [], [], []
    for r in radii:
        for c in pts[centers]:
            if used >= eval_budget:
                break
            ball = BallWindow(c, r, w)
            bb = ball.bounding_box()
            near = np.all((pts >= bb.lo) & (pts <= bb.hi), axis=1)
            used += int(np.count_nonzero(near))
            mass = float(wts[near][ball.contains(pts[near])].sum()) if np.any(near) else 0.0
            if w.variant == "exact":
                d = 2.0 * r + diam_K
            else:
                d = float(diams.hi((bb.hi - bb.lo + side_K)[None, :])[0])
            out_d.append(d)
            out_r.append(mass / d**s)
            box_lo.append(bb.lo)
            box_hi.append(bb.hi)
    d, r = np.array(out_d), np.array(out_r)
    return d, r, _top_windows(d, r, np.array(box_lo), np.array(box_hi), cut)


def _hull_box(eset: ExpansionSet, root) -> tuple[np.ndarray, np.ndarray]:
    v = eset.values
    return v.min(axis=0) + root[0], v.max(axis=0) + root[1]


def upper_density_estimate(
    sys: ExpandingSystem,
    w: PseudoNorm,
    s: float | None = None,
    M: int | None = None,
    schedule=None,
    family: str = "both",
    *,
    eset: ExpansionSet | None = None,
    budget: int = DEFAULT_BUDGET,
    steps_per_period: int = 4,
    max_centers: int = 2048,
    ball_centers: int = 16,
    ball_eval_budget: int = 1_000_000,
    workers: int = 1,
) -> DensityEstimate:
    """Sweep windows over ``D_M`` and tabulate density ratios by scale.

    One-dimensional data with a quasi-convex gauge uses intervals whose
    endpoints are data points (a geometric schedule of point counts plus a
    schedule of lengths).  Otherwise the family consists of axis boxes
    anchored at sampled data points with the bounding shapes of
    ``A^k K`` stretched per axis by ``2^{+-1/2}``; for quasi-convex gauges
    in ``n >= 2`` it adds pseudo balls around a few centres.

    Parameters
    ----------
    schedule : sequence of float, optional
        Ascending scale edges.  Defaults to a geometric ladder with
        ``steps_per_period`` steps per factor ``q^{1/n}`` from ``diam_w K``
        to the largest window.
    family : {"boxes", "balls", "both"}
        Window family; balls are skipped for the mollified gauge, whose
        sublevel sets need not be convex.
    """
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    s = sys.s if s is None else float(s)
    if s <= 0:
        raise ValueError("s must be positive")
    if eset is None:
        M = default_depth(sys) if M is None else M
        eset = enumerate_DM(sys, M, budget)
    M = eset.M
    n = sys.n
    root = root_box(sys)
    side_K = root[1] - root[0]
    diams = BoxDiameters(w)
    hull_lo, hull_hi = _hull_box(eset, root)
    top = float(diams.hi((hull_hi - hull_lo)[None, :])[0])
    period = sys.q ** (1.0 / n)

    cut2 = top / period**2 * (1 - 1e-12)
    cut1 = top / period * (1 - 1e-12)
    parts: list[tuple[str, np.ndarray, np.ndarray]] = []
    tops: list = []
    if n == 1 and w.quasi_convex:
        base = float(side_K[0])
        lengths = base * period ** (np.arange(0, M * steps_per_period + 1) / steps_per_period)
        d, r, t = _sweep_intervals(eset.values[:, 0], eset.weights, w, s, base, lengths, cut2)
        parts.append(("interval", d, r))
        tops += t
    else:
        centers = _center_sample(eset.values, max_centers)
        if family in ("boxes", "both") or not w.quasi_convex or n == 1:
            shapes = _box_shapes(sys.A.entries, side_K, M, (2**-0.5, 1.0, 2**0.5),
                                 tuple(2.0 ** np.linspace(-1, 1, 9)))
            d, r, t = _sweep_boxes(eset, s, side_K, shapes, centers, diams, workers, cut2)
            parts.append(("box", d, r))
            tops += t
        if family in ("balls", "both") and w.quasi_convex and n >= 2:
            bc = centers[_center_sample(centers, ball_centers)]
            d, r, t = _sweep_balls(eset, w, s, side_K, M, bc, diams, ball_eval_budget, cut2)
            parts.append(("ball", d, r))
            tops += t
    tops.sort(key=lambda x: -x[0])

    if schedule is None:
        lo_edge = float(diams.hi(side_K[None, :])[0])
        j = np.arange(0, int(math.floor(math.log(top / lo_edge) / math.log(period) * steps_per_period)) + 1)
        edges = np.sort(top * period ** (-j / steps_per_period))
    else:
        edges = np.sort(np.asarray(schedule, dtype=float))
    J = len(edges)
    per_scale = np.zeros(J)
    rows = []
    total = 0
    for name, d, r in parts:
        b = np.searchsorted(edges, d * (1 + 1e-12), side="right") - 1
        keep = b >= 0
        sup = np.zeros(J)
        np.maximum.at(sup, b[keep], r[keep])
        cnt = np.bincount(b[keep], minlength=J)
        per_scale = np.maximum(per_scale, sup)
        total += int(keep.sum())
        rows.extend(ScaleRow(float(edges[i]), name, int(cnt[i]), float(sup[i]))
                    for i in range(J) if cnt[i])
    rows.sort(key=lambda row: (row.scale, row.family))
    suffix = np.maximum.accumulate(per_scale[::-1])[::-1]

    all_d = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    all_r = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
    best = float(all_r[all_d >= cut2].max(initial=0.0))
    last = float(all_r[all_d >= cut1].max(initial=0.0))
    return DensityEstimate(s=s, M=M, family=family, schedule=edges, rows=rows, per_scale=per_scale,
                           suffix=suffix, best=best, top=top, drift=best - last,
                           windows_swept=total, best_windows=tops[:8])


def amplification_density(sys: ExpandingSystem, w: PseudoNorm, witness, k: int,
                          s: float | None = None, budget: int = DEFAULT_BUDGET,
                          t_max: int = 3) -> dict:
    """Density lower bounds from a collision folded ``k`` times.

    The point ``a_k`` has at least ``2^k`` expansions of depth ``kM``, so
    every point of ``A^t a_k + D_t`` carries at least ``2^k`` words of depth
    ``kM + t`` and the window spanned by them has mass ``>= 2^k N^t``.  Its
    diameter is ``diam_w D_t`` by translation invariance.  As ``t`` grows
    the ratio tends to ``2^k / diam_w(K)^s``, reported as ``limit``.
    """
    s = sys.s if s is None else float(s)
    amp = collision_amplify(sys, witness, k, budget)
    root = root_box(sys)
    diams = BoxDiameters(w)
    windows = []
    for t in range(1, t_max + 1):
        if sys.N**t > min(budget, 10**5):
            break
        pts = enumerate_DM(sys, t, budget).values
        d = diam_w(w, points=pts).hi
        if d <= 0:
            continue
        mass = float(amp.multiplicity_bound) * sys.N**t
        windows.append({"t": t, "mass_lower": mass, "diam": d, "ratio": mass / d**s})
    limit = amp.multiplicity_bound / float(diams.hi((root[1] - root[0])[None, :])[0]) ** s
    best = max((x["ratio"] for x in windows), default=limit)
    return {"fold": k, "point": amp.point, "multiplicity_bound": amp.multiplicity_bound,
            "verified": amp.verified, "observed_weight": amp.observed_weight,
            "windows": windows, "ratio": best, "limit": limit}


# --------------------------------------------------------------------------
# measure brackets


@dataclass
class MeasureOptions:
    budget: int = DEFAULT_BUDGET
    state_budget: int = 10**6
    schedule: list | None = None
    family: str = "both"
    fold: int = 10
    sigma_depth: int | None = None
    refine: int = 4
    lo_windows: int = 512
    r0: float | None = None
    seed: int = 0
    workers: int = 1
    max_centers: int = 2048


@dataclass(eq=False)
class MeasureBracket:
    s: float
    H_lo: float
    H_hi: float
    method_lo: str
    method_hi: str
    verdict: str
    M: int
    r0: float
    sigma_depth: int
    cover_bound: float
    density: DensityEstimate | None = None
    lo_ratio: float = float("nan")
    amplification: dict | None = None
    warnings: list = field(default_factory=list)

    @property
    def bracket(self) -> Bracket:
        return Bracket(self.H_lo, self.H_hi)


def _cylinder_windows(sys: ExpandingSystem, depth: int, cap: int) -> list[BoxWindow]:
    cyl = cylinders(sys, depth, max(sys.N**depth, 1))
    idx = _center_sample(cyl.centers, cap)
    lo, hi = cyl.box_lo[idx], cyl.box_hi[idx]
    return [BoxWindow(a, b) for a, b in zip(lo, hi)]


def random_lower_windows(sys: ExpandingSystem, diams: BoxDiameters, r0: float,
                    cyl: CylinderDecomposition, count: int, seed: int) -> list[BoxWindow]:
    """Cylinder hulls and random boxes of ``w``-diameter at most ``r0``."""
    root = cyl.root
    side_K = root[1] - root[0]
    k0 = 0
    while diams.hi((np.abs(np.linalg.matrix_power(sys.A.inverse, k0)) @ side_K)[None, :])[0] > r0:
        k0 += 1
        if k0 > cyl.M:
            break
    out: list[BoxWindow] = []
    per_depth = max(count // 6, 1)
    for k in range(k0, min(k0 + 3, cyl.M)):
        if sys.N**k <= DEFAULT_BUDGET:
            out.extend(_cylinder_windows(sys, k, per_depth))
    rng = substream(seed, 7, 0)
    centers = cyl.centers + cyl.offset
    tries = 0
    want = len(out) + count
    while len(out) < want and tries < 4 * count:
        tries += 1
        k = int(rng.integers(max(k0 - 1, 0), k0 + 3))
        # quantised stretch factors keep the number of distinct shapes (and diameter calls) small
        f = rng.integers(0, 9, sys.n) / 8.0 + 0.5
        side = (np.abs(np.linalg.matrix_power(sys.A.inverse, k)) @ side_K) * f
        c = centers[int(rng.integers(len(centers)))] + rng.uniform(-0.5, 0.5, sys.n) * side
        if diams.hi(side[None, :])[0] <= r0:
            out.append(BoxWindow(c - side / 2, c + side / 2))
    # windows narrower than a few cylinders give sigma brackets that cannot shrink
    floor = 2.0 * cyl.half
    return [b for b in out if np.all(b.hi - b.lo >= floor)]


def transferred_windows(sys: ExpandingSystem, diams: BoxDiameters, est: DensityEstimate,
                        r0: float) -> list[BoxWindow]:
    """Strongest sweep windows pulled back to diameter at most ``r0``.

    For ``V = U + K`` one has ``sigma(A^{-M} V) >= N^{-M} mu_M(U)``, and
    ``sigma(A^{-1} E) >= sigma(E) / N`` because ``0`` is a digit, so the
    axis hull of ``A^{-j} V`` scores at least the sweep ratio of ``U``.
    """
    root = root_box(sys)
    inv = sys.A.inverse
    out = []
    for _, lo, hi in est.best_windows:
        c = (lo + root[0] + hi + root[1]) / 2.0
        h = (hi + root[1] - lo - root[0]) / 2.0
        B = np.eye(sys.n)
        for _ in range(est.M + 64):
            B = B @ inv
            half = np.abs(B) @ h
            if diams.hi((2 * half)[None, :])[0] <= r0:
                out.append(BoxWindow(B @ c - half, B @ c + half))
                break
    return out


def measure_estimate(sys: ExpandingSystem, w: PseudoNorm, M: int | None = None,
                     options: MeasureOptions | None = None,
                     verdict: OscVerdict | None = None,
                     eset: ExpansionSet | None = None) -> MeasureBracket:
    """Bracket ``H_w^s(K)`` at the pseudo similarity dimension ``s``.

    ``H_hi`` is ``1 / best`` from :func:`upper_density_estimate`, capped by
    the cover bound ``diam_w(K)^s``; under a failed OSC the folded
    collision density is included and ``H_lo`` is 0.  ``H_lo`` is
    ``1 / sup sigma_hi(U) / diam_lo(U)^s`` over cylinder hulls and random
    boxes of diameter at most ``r0``, with ``sigma`` bracketed by
    depth-``sigma_depth`` cylinders refined ``refine`` levels at window
    boundaries.  Both ends are estimates; see the
    module notes on which side is one-sided.
    """
    opt = options or MeasureOptions()
    s = sys.s
    notes = []
    if sys.N > sys.q + 1e-9:
        msg = f"#D = {sys.N} exceeds |det A| = {sys.q:g}, so s = {s:.6g} > n"
        warnings.warn(msg)
        notes.append(msg)
    if verdict is None:
        verdict = decide_osc(sys, budget=opt.budget, state_budget=opt.state_budget)
    M = default_depth(sys) if M is None else M
    est = upper_density_estimate(sys, w, s, M, opt.schedule, opt.family, eset=eset,
                                 budget=opt.budget, max_centers=opt.max_centers,
                                 workers=opt.workers)
    diams = BoxDiameters(w)
    root = root_box(sys)
    diam_root = diams._bracket((root[1] - root[0])[None, :])[0]
    cover = float(diam_root[1]) ** s
    r0 = opt.r0 if opt.r0 is not None else float(diam_root[1]) / sys.q ** (2.0 / sys.n)
    sd = opt.sigma_depth if opt.sigma_depth is not None else default_depth(sys, SIGMA_CAP)

    density = est.best
    method_hi = "density-sweep"
    amp = None
    if verdict.status == "Fails" and verdict.witness is not None:
        amp = amplification_density(sys, w, verdict.witness, opt.fold, s, opt.budget)
        est.amplification = amp
        if amp["ratio"] > density:
            density = amp["ratio"]
            method_hi = "collision-amplification"
    H_hi = 1.0 / density if density > 0 else math.inf
    if cover < H_hi:
        H_hi, method_hi = cover, "cover-bound"

    if verdict.status == "Fails":
        return MeasureBracket(s=s, H_lo=0.0, H_hi=H_hi, method_lo="osc-fails", method_hi=method_hi,
                              verdict=verdict.status, M=est.M, r0=r0, sigma_depth=sd,
                              cover_bound=cover, density=est, amplification=amp, warnings=notes)

    cyl = cylinders(sys, sd, opt.budget)
    wins = random_lower_windows(sys, diams, r0, cyl, opt.lo_windows, opt.seed)
    wins += transferred_windows(sys, diams, est, r0)
    sig_lo, sig_hi = sigma_refined(sys, cyl, wins, opt.refine)
    dlo = diams.lo(np.array([x.hi - x.lo for x in wins]))
    ok = dlo > 0
    ratios = sig_hi[ok] / dlo[ok] ** s
    i = int(np.argmax(ratios))
    lo_ratio = float(ratios[i])
    H_lo = 1.0 / lo_ratio
    sel = np.flatnonzero(ok)[i]
    if sig_lo[sel] == 0 or sig_hi[sel] > 1.05 * sig_lo[sel]:
        notes.append("sigma bracket of the extremal lower window did not shrink; raise sigma_depth")
    if H_lo > H_hi:
        notes.append(f"H_lo {H_lo:.6g} exceeds H_hi {H_hi:.6g}; window families too coarse")
    return MeasureBracket(s=s, H_lo=H_lo, H_hi=H_hi, method_lo="cylinder-windows",
                          method_hi=method_hi, verdict=verdict.status, M=est.M, r0=r0,
                          sigma_depth=sd, cover_bound=cover, density=est, lo_ratio=lo_ratio,
                          warnings=notes)


# --------------------------------------------------------------------------
# pointwise upper convex density


@dataclass(eq=False)
class ConvexDensityTrace:
    x: np.ndarray
    s: float
    radii: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    windows: np.ndarray


def _fit_scale(diams: BoxDiameters, shape: np.ndarray, r: float) -> float:
    """Largest ``t`` (to 2^-30 relative) with ``diam_hi(t * shape) <= r``."""
    lo, hi = 0.0, 1.0
    while diams.hi((hi * shape)[None, :])[0] <= r:
        lo, hi = hi, hi * 2.0
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if diams.hi((mid * shape)[None, :])[0] <= r:
            lo = mid
        else:
            hi = mid
    return lo


def convex_density_trace(sys: ExpandingSystem, w: PseudoNorm, x, s: float | None = None,
                         radii=(0.5, 0.25, 0.125), H: Bracket | None = None,
                         sigma_depth: int | None = None, refine: int = 4,
                         budget: int = DEFAULT_BUDGET) -> ConvexDensityTrace:
    """Windows through ``x`` of shrinking diameter and their ``H``-mass ratios.

    For each ``r`` the boxes contain ``x`` at 5 relative positions per axis,
    with shapes proportional to the root box stretched by ``2^{+-1/2}``
    and scaled to ``diam_hi <= r``.  Entry ``lo`` uses ``H_lo sigma_lo /
    diam_hi^s`` and ``hi`` uses ``H_hi sigma_hi / diam_lo^s``.

    Raises
    ------
    PointNotOnAttractor
        If ``x`` is farther from ``K`` than the attractor cloud resolves.
    """
    s = sys.s if s is None else float(s)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    probe = attractor_cloud(sys, default_depth(sys, 4096), budget)
    dist = float(cKDTree(probe.points).query(x[None, :])[0][0])
    if dist > probe.err_radius * (1 + 1e-9) + 1e-12:
        raise PointNotOnAttractor(f"x is {dist:.4g} from the cloud (resolution {probe.err_radius:.4g})")
    if H is None:
        mb = measure_estimate(sys, w)
        H = Bracket(mb.H_lo, mb.H_hi)
    sd = sigma_depth if sigma_depth is not None else default_depth(sys, SIGMA_CAP)
    cyl = cylinders(sys, sd, budget)
    diams = BoxDiameters(w)
    side_K = cyl.root[1] - cyl.root[0]
    side_K = np.where(side_K > 0, side_K, 1.0)
    aspects = [np.array(f) for f in itertools.product((2**-0.5, 1.0, 2**0.5), repeat=sys.n)]
    positions = [np.array(p) for p in itertools.product((0.0, 0.25, 0.5, 0.75, 1.0), repeat=sys.n)]
    lo_t, hi_t, cnt = [], [], []
    for r in radii:
        wins, sides = [], []
        for f in aspects:
            shape = side_K * f
            side = _fit_scale(diams, shape, r) * shape
            for p in positions:
                wins.append(BoxWindow(x - p * side, x + (1 - p) * side))
                sides.append(side)
        sides = np.array(sides)
        sl, sh = sigma_refined(sys, cyl, wins, refine)
        dl, dh = diams.lo(sides), diams.hi(sides)
        lo_v = H.lo * sl / dh**s
        hi_v = np.where(dl > 0, H.hi * sh / np.where(dl > 0, dl, 1.0) ** s, np.inf)
        lo_t.append(float(lo_v.max()))
        hi_t.append(float(hi_v.max()))
        cnt.append(len(wins))
    return ConvexDensityTrace(x=x, s=s, radii=np.asarray(radii, dtype=float), lo=np.array(lo_t),
                              hi=np.array(hi_t), windows=np.array(cnt))


# --------------------------------------------------------------------------
# dimensions


@dataclass(frozen=True)
class DimEstimate:
    s_w_hat: float
    euclid_dim_hat: float
    bounds: tuple[float, float]
    inside: bool
    s_w: float
    levels: tuple[int, ...]
    scales: tuple[int, ...]


def _pseudo_cell_counts(sys: ExpandingSystem, M: int, levels, budget: int) -> list[int]:
    """Distinct cells ``floor(A^L x)`` over the depth-``M`` cloud, per ``L``."""
    A = sys.A.entries
    diagonal = sys.exact and np.count_nonzero(A - np.diag(np.diag(A))) == 0
    if diagonal:
        from .attractor import _exact_scaled_words

        p = _exact_scaled_words(sys, M)
        a = np.diag(sys.int_matrix).astype(object)
        out = []
        for L in levels:
            # x = p / (scale a^M) so floor(a^L x) = p // (scale a^{M-L})
            div = np.array([int(sys.digit_scale) * int(ai) ** (M - L) for ai in a], dtype=object)
            keys = p.astype(object) // div
            out.append(len({tuple(r) for r in keys.tolist()}))
        return out
    pts = attractor_cloud(sys, M, budget).points
    out = []
    for L in levels:
        y = pts @ np.linalg.matrix_power(A, L).T
        out.append(len(np.unique(np.floor(y + 1e-9), axis=0)))
    return out


def dim_estimate(sys: ExpandingSystem, w: PseudoNorm | None = None, M: int | None = None,
                 budget: int = DEFAULT_BUDGET, tol: float = 0.02) -> DimEstimate:
    """Pseudo and Euclidean box-counting dimensions of ``K``.

    Cells ``A^{-L}(z + [0,1)^n)`` have ``w``-diameter of order
    ``q^{-L/n}``, so the slope of ``ln #cells`` against ``L ln q / n``
    estimates ``s_w``.  The Euclidean dimension regresses dyadic box counts
    of the same cloud down to four times the largest cylinder extent.
    ``bounds`` is ``[ln q / (n ln lambda_max), ln q / (n ln lambda_min)]``
    times ``s_w_hat``; ``inside`` allows ``tol`` of regression slack.
    """
    M = default_depth(sys) if M is None else M
    if M < 4:
        raise ValueError("need depth >= 4 for a regression")
    levels = tuple(range(1, M - 1))
    counts = _pseudo_cell_counts(sys, M, levels, budget)
    x = np.array(levels) * math.log(sys.q) / sys.n
    s_hat = float(np.polyfit(x, np.log(counts), 1)[0])

    pts = attractor_cloud(sys, M, budget).points
    # grid anchored at the root box so the far face of K opens no extra row
    lo, hi = root_box(sys)
    extent = float(np.max(hi - lo)) or 1.0
    cyl_ext = float(np.max(np.abs(np.linalg.matrix_power(sys.A.inverse, M)).sum(axis=1))) * extent
    scales = []
    j = 2
    while extent * 2.0**-j >= 4 * cyl_ext:
        scales.append(j)
        j += 1
    if len(scales) < 2:
        raise BudgetExceeded("cloud too coarse for Euclidean box counting; raise M")
    bc = [len(np.unique(np.floor((pts - lo) / (extent * 2.0**-j)), axis=0)) for j in scales]
    e_hat = float(np.polyfit(np.array(scales) * math.log(2), np.log(bc), 1)[0])
    n = sys.n
    lam_lo, lam_hi = sys.A.lambda_min, sys.A.lambda_max
    bounds = (math.log(sys.q) / (n * math.log(lam_hi)) * s_hat,
              math.log(sys.q) / (n * math.log(lam_lo)) * s_hat)
    inside = bounds[0] - tol <= e_hat <= bounds[1] + tol
    return DimEstimate(s_w_hat=s_hat, euclid_dim_hat=e_hat, bounds=bounds, inside=inside,
                       s_w=sys.s, levels=levels, scales=tuple(scales))


# --------------------------------------------------------------------------
# convolution identities


@dataclass(frozen=True)
class ConvolutionReport:
    M: int
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    z: float
    density_mu: float | None = None
    density_conv: float | None = None


def _in_box(y: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.all((y >= lo) & (y <= hi), axis=1)


def convolution_check(sys: ExpandingSystem, M: int, W: BoxWindow, samples: int = 100_000,
                      seed: int = 0, workers: int = 1, w: PseudoNorm | None = None,
                      budget: int = DEFAULT_BUDGET) -> ConvolutionReport:
    """Compare ``sigma(A^{-M} W)`` with ``(mu_M * sigma)(W) / N^M`` by Monte Carlo.

    The two sides use independent chaos-game streams.  With ``w`` given,
    also compares window densities of ``mu_M`` and ``mu_M * sigma`` on the
    largest boxes anchored at the lowest expansion.
    """
    lo, hi = np.asarray(W.lo, dtype=float), np.asarray(W.hi, dtype=float)
    X = chaos_game(sys, samples, seed=seed, stream=0, workers=workers)
    AM = np.linalg.matrix_power(sys.A.entries, M)
    hit = _in_box(X @ AM.T, lo, hi).astype(float)
    p1 = float(hit.mean())
    se1 = float(hit.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0

    Y = chaos_game(sys, samples, seed=seed, stream=1, workers=workers)
    eset = enumerate_DM(sys, M, budget)
    g = np.zeros(samples)
    for d, m in zip(eset.values, eset.weights):
        g += m * _in_box(Y + d, lo, hi)
    g /= float(sys.N) ** M
    p2 = float(g.mean())
    se2 = float(g.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    se = math.hypot(se1, se2)
    z = (p1 - p2) / se if se > 0 else (0.0 if p1 == p2 else math.inf)

    dmu = dconv = None
    if w is not None:
        root = root_box(sys)
        side_K = root[1] - root[0]
        diams = BoxDiameters(w)
        base = eset.values.min(axis=0)
        dmu = dconv = 0.0
        for k in range(max(M - 1, 1), M + 1):
            side = np.maximum(np.abs(np.linalg.matrix_power(sys.A.entries, k)) @ side_K - side_K, 0)
            d = float(diams.hi((side + side_K)[None, :])[0])
            mass = float(eset.weights[_in_box(eset.values, base, base + side)].sum())
            big_lo, big_hi = base + root[0], base + side + root[1]
            conv = sum(m * _in_box(Y + v, big_lo, big_hi).mean()
                       for v, m in zip(eset.values, eset.weights))
            dmu = max(dmu, mass / d**sys.s)
            dconv = max(dconv, float(conv) / d**sys.s)
    return ConvolutionReport(M=M, lhs=p1, lhs_se=se1, rhs=p2, rhs_se=se2, z=z,
                             density_mu=dmu, density_conv=dconv)


# --------------------------------------------------------------------------
# scale covariance


@dataclass(frozen=True)
class ScaleCovariance:
    ratios: np.ndarray
    mapped: np.ndarray
    factor: float
    max_rel_err: float


def scale_covariance(sys: ExpandingSystem, w: PseudoNorm, M: int, count: int = 50,
                     seed: int = 0, s: float | None = None,
                     budget: int = DEFAULT_BUDGET) -> ScaleCovariance:
    """Window ratios on ``D_M`` against ``A D_M`` with windows mapped by ``A``.

    Counts are unchanged and ``w``-diameters scale by ``q^{1/n}``, so
    ``ratio(A D_M, A U) q^{s/n}`` must equal ``ratio(D_M, U)``.  Window
    diameters are taken over the vertex set on both sides.
    """
    s = sys.s if s is None else float(s)
    eset = enumerate_DM(sys, M, budget)
    P = eset.values
    A = sys.A.entries
    AP = P @ A.T
    rng = substream(seed, 11, 0)
    span = P.max(axis=0) - P.min(axis=0)
    span = np.where(span > 0, span, 1.0)
    back = np.linalg.solve(A, AP.T).T
    ratios, mapped = [], []
    for _ in range(count):
        c = P[int(rng.integers(len(P)))] + rng.uniform(-0.25, 0.25, sys.n) * span
        side = rng.uniform(0.05, 0.6, sys.n) * span
        lo, hi = c - side / 2, c + side / 2
        verts = box_vertices(lo, hi)
        m1 = float(eset.weights[_in_box(P, lo, hi)].sum())
        m2 = float(eset.weights[_in_box(back, lo, hi)].sum())
        d1 = diam_w(w, points=verts).hi
        d2 = diam_w(w, points=verts @ A.T).hi
        ratios.append(m1 / d1**s)
        mapped.append(m2 / d2**s)
    ratios, mapped = np.array(ratios), np.array(mapped)
    factor = sys.q ** (s / sys.n)
    scaled = mapped * factor
    denom = np.maximum(np.abs(ratios), 1e-300)
    err = float(np.max(np.abs(scaled - ratios) / denom)) if len(ratios) else 0.0
    return ScaleCovariance(ratios=ratios, mapped=mapped, factor=factor, max_rel_err=err)
