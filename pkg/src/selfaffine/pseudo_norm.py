"""Homogeneous gauges ``w`` with ``w(Ax) = q^{1/n} w(x)``.

Three variants are supported:

``mollified``
    ``w(x) = sum_j q^{-j/n} h(A^j x)`` with ``h`` the indicator of the
    annulus ``V = A B_1 \\ B_1`` smoothed by a bump of radius ``delta``.
    ``h`` is tabulated once on a grid and interpolated multilinearly.
``step``
    Same sum with ``h`` the bare indicator of ``V``; then ``w(x) = q^{-k/n}``
    where ``A^k x`` lies in ``V``.  Discontinuous, but cheap.
``exact``
    ``w(x) = ||x||``, valid only when ``A`` is a similarity.

All variants are evaluated by reducing ``x`` to the fundamental annulus
``V`` and rescaling, so homogeneity holds to rounding error at every scale.
"""

from __future__ import annotations

import itertools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetExceeded, EmptySet, FitViolation, GridTooCoarse, NotSimilarity
from .linalg import ExpandingMatrix, ExpandingSystem, RenormedNorm

log = logging.getLogger(__name__)

VARIANTS = ("mollified", "step", "exact")
_VARIANT_CODE = {"mollified": 0, "step": 1, "exact": 2}
GRID_MAGIC = b"PNRMGRID"
GRID_VERSION = 1


@dataclass(frozen=True, eq=False)
class HGrid:
    """Tabulated ``h`` on a regular grid; zero outside the grid box."""

    lo: np.ndarray
    step: np.ndarray
    values: np.ndarray

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.step * (np.array(self.values.shape) - 1)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        n = y.shape[-1]
        shape = np.array(self.values.shape)
        u = (y - self.lo) / self.step
        inside = np.all((u >= 0) & (u <= shape - 1), axis=-1)
        out = np.zeros(y.shape[:-1])
        if not np.any(inside):
            return out
        ui = u[inside]
        i0 = np.minimum(np.floor(ui).astype(np.int64), shape - 2)
        f = ui - i0
        acc = np.zeros(len(ui))
        for corner in itertools.product((0, 1), repeat=n):
            c = np.array(corner)
            wgt = np.prod(np.where(c == 1, f, 1.0 - f), axis=-1)
            idx = tuple((i0 + c).T)
            acc += wgt * self.values[idx]
        out[inside] = acc
        return out


@dataclass(frozen=True)
class DiamBracket:
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(eq=False)
class PseudoNorm:
    variant: str
    matrix: ExpandingMatrix
    norm_ref: RenormedNorm
    delta: float | None = None
    grid: HGrid | None = field(default=None, repr=False)
    quad_nodes: int = 0
    # j-range of possibly non-zero terms for points of V (inclusive)
    j_window: tuple[int, int] = (0, 0)
    p: int = 1
    alpha: float = 1.0
    lipschitz: float = 0.0
    interp_error: float = 0.0
    beta_hat: float | None = None
    lambda_eps_table: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.matrix.n

    @property
    def q(self) -> float:
        return self.matrix.q

    @property
    def smooth(self) -> bool:
        return self.variant != "step"

    @property
    def upper_on_V(self) -> float:
        """Upper bound ``p q^{p/n}`` for ``w`` on the fundamental annulus."""
        return self.p * self.q ** (self.p / self.n)

    @property
    def quasi_convex(self) -> bool:
        """Whether every sublevel set ``{w <= c}`` is convex."""
        return self.variant in ("step", "exact")

    def __call__(self, x) -> np.ndarray | float:
        return evaluate(self, x)

    def constants(self) -> dict:
        return {
            "variant": self.variant,
            "smooth": self.smooth,
            "delta": self.delta,
            "theta": self.norm_ref.theta,
            "renorm_m": self.norm_ref.m,
            "p": self.p,
            "alpha": self.alpha,
            "upper_on_V": self.upper_on_V,
            "beta_hat": self.beta_hat,
            "lambda_eps": dict(self.lambda_eps_table),
            "interp_error": self.interp_error,
        }


# --------------------------------------------------------------------------
# annulus machinery


def in_annulus(norm: RenormedNorm, y: np.ndarray) -> np.ndarray:
    """Membership in ``V = A B_1 \\ B_1`` for rows of ``y``."""
    inv = norm.matrix.inverse
    return (norm(y) > 1.0) & (norm(y @ inv.T) <= 1.0)


def reduce_to_annulus(norm: RenormedNorm, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y, k)`` with ``y = A^k x`` in ``V`` for every non-zero row.

    Steps are taken one matrix multiply at a time so that reducing ``Ax``
    replays the same floating point operations as reducing ``x``.
    Zero rows are returned unchanged with ``k = 0``.
    """
    A = norm.matrix.entries
    inv = norm.matrix.inverse
    y = np.array(x, dtype=float, copy=True)
    k = np.zeros(len(y), dtype=np.int64)
    live = np.any(y != 0, axis=1)
    while True:
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        ys = y[idx]
        up = norm(ys) <= 1.0
        down_cand = ys @ inv.T
        down = (~up) & (norm(down_cand) > 1.0)
        if not (np.any(up) or np.any(down)):
            break
        y[idx[up]] = ys[up] @ A.T
        k[idx[up]] += 1
        y[idx[down]] = down_cand[down]
        k[idx[down]] -= 1
        live[idx[~(up | down)]] = False
    return y, k


def _canonical_sign(x: np.ndarray) -> np.ndarray:
    """Flip rows so the first non-zero coordinate is positive (exact symmetry)."""
    nz = x != 0
    first = np.argmax(nz, axis=1)
    lead = x[np.arange(len(x)), first]
    return np.where((lead < 0)[:, None], -x, x)


def _as_points(n: int, x) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=float)
    if n == 1:
        shape = x.shape if (x.ndim == 0 or x.shape[-1] != 1) else x.shape[:-1]
        return x.reshape(-1, 1), shape
    return x.reshape(-1, n), x.shape[:-1]


def _annulus_value(w: PseudoNorm, y: np.ndarray) -> np.ndarray:
    """``sum_j q^{-j/n} h(A^j y)`` for ``y`` in (a neighbourhood of) ``V``."""
    A = w.matrix.entries
    inv = w.matrix.inverse
    qn = w.q ** (1.0 / w.n)
    jlo, jhi = w.j_window
    total = w.grid(y)
    z = y
    for j in range(1, jhi + 2):
        z = z @ A.T
        total = total + qn ** (-j) * w.grid(z)
    z = y
    for j in range(1, -jlo + 2):
        z = z @ inv.T
        total = total + qn**j * w.grid(z)
    return total


def evaluate(w: PseudoNorm, x) -> np.ndarray | float:
    """Evaluate ``w`` at one point or at the rows of an array."""
    pts, shape = _as_points(w.n, x)
    pts = _canonical_sign(pts)
    if w.variant == "exact":
        out = np.linalg.norm(pts, axis=1)
    else:
        y, k = reduce_to_annulus(w.norm_ref, pts)
        zero = ~np.any(pts != 0, axis=1)
        scale = w.q ** (-k / w.n)
        if w.variant == "step":
            base = np.ones(len(pts))
        else:
            base = _annulus_value(w, y)
        out = np.where(zero, 0.0, scale * base)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# construction


def _annulus_box(norm: RenormedNorm, pad: float) -> np.ndarray:
    # V lies in A B_1 and ||u|| <= ||u||' so |<e_i, Au>| <= ||A^T e_i||
    A = norm.matrix.entries
    return np.linalg.norm(A, axis=1) + pad


def sample_annulus(norm: RenormedNorm, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from ``V`` by rejection from its bounding box."""
    half = _annulus_box(norm, 0.0)
    out = []
    got = 0
    while got < count:
        cand = rng.uniform(-half, half, size=(max(4 * (count - got), 1024), len(half)))
        keep = cand[in_annulus(norm, cand)]
        out.append(keep)
        got += len(keep)
    return np.concatenate(out)[:count]


def _window(norm: RenormedNorm, delta: float) -> tuple[int, int]:
    """j-range outside which ``A^j y`` misses ``V + B_delta`` for ``y`` in ``V``."""
    theta = norm.theta
    r_v = norm.matrix.op_norm(1)
    r_out = r_v + delta
    jhi = int(math.floor(math.log(r_out) / math.log(theta)))
    jlo = -int(math.floor(math.log(r_v / (1.0 - delta)) / math.log(theta)))
    return jlo, jhi


def _bump_rule(norm: RenormedNorm, delta: float, nodes: int, rng: np.random.Generator):
    n = norm.matrix.n
    if n <= 3:
        x1, w1 = np.polynomial.legendre.leggauss(nodes)
        grids = np.meshgrid(*([x1 * delta] * n), indexing="ij")
        t = np.stack([g.ravel() for g in grids], axis=1)
        wq = np.ones(len(t))
        for g in np.meshgrid(*([w1 * delta] * n), indexing="ij"):
            wq = wq * g.ravel()
    else:
        t = rng.uniform(-delta, delta, size=(nodes, n))
        wq = np.full(len(t), (2 * delta) ** n / nodes)
    r = norm(t)
    inside = r < delta
    phi = np.zeros(len(t))
    phi[inside] = np.exp(-(delta**2) / (delta**2 - r[inside] ** 2))
    wts = wq * phi
    keep = wts > 0
    wts = wts[keep] / wts[keep].sum()
    return t[keep], wts


def _tabulate_h(norm: RenormedNorm, lo, step, dims, t, wts, chunk_budget=2_000_000):
    axes = [lo[i] + step[i] * np.arange(dims[i]) for i in range(len(dims))]
    mesh = np.meshgrid(*axes, indexing="ij")
    g = np.stack([m.ravel() for m in mesh], axis=1)
    out = np.empty(len(g))
    chunk = max(1, chunk_budget // len(t))
    for a in range(0, len(g), chunk):
        z = g[a : a + chunk, None, :] - t[None, :, :]
        flat = z.reshape(-1, z.shape[-1])
        mem = in_annulus(norm, flat).reshape(z.shape[:2])
        out[a : a + chunk] = mem @ wts
    return out.reshape(dims)


def _interp_error_estimate(values: np.ndarray) -> float:
    # multilinear interpolation error <= sum_i max|d2 h / d u_i^2| / 8 in grid units
    total = 0.0
    for ax in range(values.ndim):
        if values.shape[ax] < 3:
            continue
        d2 = np.diff(values, n=2, axis=ax)
        total += float(np.max(np.abs(d2))) / 8.0
    return total


def build_pseudo_norm(
    sys: ExpandingSystem,
    variant: str = "mollified",
    delta: float = 0.25,
    grid_step: float | None = None,
    quad_nodes: int | None = None,
    max_interp_error: float = 0.05,
    max_grid_points: int = 2_000_000,
    calibration_samples: int = 20_000,
    seed: int = 0,
    cache_dir: str | Path | None = None,
) -> PseudoNorm:
    """Construct a pseudo norm for the system's matrix.

    Parameters
    ----------
    variant : {"mollified", "step", "exact"}
    delta : float
        Mollifier radius, ``0 < delta < 1/2`` (mollified variant only).
    grid_step : float, optional
        Spacing of the ``h`` table; defaults to ``delta / 10``.
    quad_nodes : int, optional
        Gauss nodes per axis (32 for ``n <= 2``, 16 for ``n = 3``) or Monte
        Carlo node count for ``n > 3``.
    cache_dir : path, optional
        Directory for the binary ``h``-grid cache, keyed by content hash.

    Raises
    ------
    NotSimilarity
        ``variant="exact"`` with a matrix that is not a similarity.
    GridTooCoarse
        The interpolation error estimate exceeds ``max_interp_error``.
    """
    A = sys.A
    norm = sys.norm
    if variant not in VARIANTS:
        raise ValueError(f"unknown pseudo-norm variant {variant!r}")
    rng = np.random.default_rng(seed)

    if variant == "exact":
        rho = A.q ** (1.0 / A.n)
        gram = A.entries.T @ A.entries
        if not np.allclose(gram, rho**2 * np.eye(A.n), rtol=0, atol=1e-9 * rho**2):
            raise NotSimilarity("A^T A is not a multiple of the identity")
        return PseudoNorm(variant="exact", matrix=A, norm_ref=norm, p=1, alpha=1.0, lipschitz=1.0)

    if variant == "step":
        return PseudoNorm(variant="step", matrix=A, norm_ref=norm, p=1, alpha=1.0)

    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 1/2)")
    n = A.n
    if quad_nodes is None:
        quad_nodes = {1: 32, 2: 32, 3: 16}.get(n, 20_000)
    if grid_step is None:
        grid_step = delta / 10.0
    half = _annulus_box(norm, delta)
    dims = tuple(int(2 * math.ceil(h / grid_step) + 1) for h in half)
    if math.prod(dims) > max_grid_points:
        raise BudgetExceeded(f"h-grid of {math.prod(dims)} points exceeds {max_grid_points}")
    step = 2 * half / (np.array(dims) - 1)
    lo = -half

    values = None
    cache_path = None
    if cache_dir is not None:
        from .io import content_hash

        key = content_hash(
            {"A": A.entries.tolist(), "delta": delta, "dims": dims, "theta": norm.theta,
             "m": norm.m, "nodes": quad_nodes}
        )
        cache_path = Path(cache_dir) / f"hgrid-{key}.bin"
        if cache_path.exists():
            values = read_grid_cache(cache_path)["values"]
    if values is None:
        t, wts = _bump_rule(norm, delta, quad_nodes, rng)
        values = _tabulate_h(norm, lo, step, dims, t, wts)
    grid = HGrid(lo=lo, step=step, values=values)
    interp_err = _interp_error_estimate(values)
    if interp_err > max_interp_error:
        raise GridTooCoarse(
            f"interpolation error estimate {interp_err:.3g} exceeds cap {max_interp_error:g}"
        )

    w = PseudoNorm(
        variant="mollified", matrix=A, norm_ref=norm, delta=delta, grid=grid,
        quad_nodes=quad_nodes, j_window=_window(norm, delta), interp_error=interp_err,
    )
    if cache_path is not None and not cache_path.exists():
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        write_grid_cache(cache_path, w)

    # measured constants on V
    ys = sample_annulus(norm, calibration_samples, rng)
    w.alpha = float(np.min(grid(ys)))
    w.p = _measure_p(w, ys)
    w.lipschitz = _measure_lipschitz(w, ys, rng)
    return w


def _measure_p(w: PseudoNorm, ys: np.ndarray) -> int:
    A = w.matrix.entries
    inv = w.matrix.inverse
    jlo, jhi = w.j_window
    count = (w.grid(ys) > 0).astype(int)
    reach = 0
    z = ys
    for j in range(1, jhi + 2):
        z = z @ A.T
        count += w.grid(z) > 0
    z = ys
    for j in range(1, -jlo + 2):
        z = z @ inv.T
        nz = w.grid(z) > 0
        count += nz
        if np.any(nz):
            reach = j
    p = int(max(np.max(count), reach, 1))
    cap = jhi - jlo + 1
    if p + 4 < cap:
        log.debug("certified j-window %s wider than measured p + 4 = %d", w.j_window, p + 4)
    return p


def _measure_lipschitz(w: PseudoNorm, ys: np.ndarray, rng: np.random.Generator) -> float:
    h = 1e-4
    d = rng.standard_normal(ys.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a = _annulus_value(w, ys)
    b = _annulus_value(w, ys + h * d)
    return float(np.max(np.abs(b - a)) / h) * 1.25


# --------------------------------------------------------------------------
# grid cache file


def write_grid_cache(path: str | Path, w: PseudoNorm) -> None:
    """Write the ``h`` table.

    Layout (little-endian): magic ``PNRMGRID``; u32 version; u32 variant code;
    f64 delta; u32 n; n x u32 grid dims; f64 theta; u32 renorm window m;
    n x f64 grid origin; n x f64 grid step; then the row-major ``h`` samples
    as f64.
    """
    g = w.grid
    n = w.n
    head = GRID_MAGIC + struct.pack("<IIdI", GRID_VERSION, _VARIANT_CODE[w.variant], w.delta, n)
    head += struct.pack(f"<{n}I", *g.values.shape)
    head += struct.pack("<dI", w.norm_ref.theta, w.norm_ref.m)
    head += struct.pack(f"<{n}d", *g.lo) + struct.pack(f"<{n}d", *g.step)
    Path(path).write_bytes(head + np.ascontiguousarray(g.values, dtype="<f8").tobytes())


def read_grid_cache(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise ValueError(f"{path} is not a pseudo-norm grid cache")
    off = 8
    version, code, delta, n = struct.unpack_from("<IIdI", raw, off)
    off += struct.calcsize("<IIdI")
    dims = struct.unpack_from(f"<{n}I", raw, off)
    off += 4 * n
    theta, m = struct.unpack_from("<dI", raw, off)
    off += struct.calcsize("<dI")
    lo = np.array(struct.unpack_from(f"<{n}d", raw, off))
    off += 8 * n
    step = np.array(struct.unpack_from(f"<{n}d", raw, off))
    off += 8 * n
    values = np.frombuffer(raw, dtype="<f8", offset=off).reshape(dims).copy()
    variant = {v: k for k, v in _VARIANT_CODE.items()}[code]
    return {"version": version, "variant": variant, "delta": delta, "dims": dims,
            "theta": theta, "m": m, "lo": lo, "step": step, "values": values}


# --------------------------------------------------------------------------
# sampled constants


def sample_scales(w: PseudoNorm, count: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Points ``A^k v`` with ``v`` uniform in ``V`` and ``k`` uniform in ``[-horizon, horizon]``."""
    v = sample_annulus(w.norm_ref, count, rng)
    k = rng.integers(-horizon, horizon + 1, size=count)
    out = np.empty_like(v)
    for kk in np.unique(k):
        sel = k == kk
        base = w.matrix.entries if kk >= 0 else w.matrix.inverse
        out[sel] = v[sel] @ np.linalg.matrix_power(base, abs(int(kk))).T
    return out


def estimate_beta(w: PseudoNorm, samples: int = 10_000, seed: int = 0, horizon: int = 4) -> float:
    """Lower estimate of the quasi-triangle constant ``sup w(x+y) / max(w(x), w(y))``.

    Pairs mix independent draws across annuli with near-parallel pairs
    ``(x, t x)``, where the ratio is largest for norms.  The result is stored
    on ``w`` as ``beta_hat``.
    """
    if samples < 1000:
        raise ValueError("estimate_beta needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    half = samples // 2
    x = sample_scales(w, samples, horizon, rng)
    y = np.concatenate([
        sample_scales(w, half, horizon, rng),
        x[half:] * rng.uniform(0.5, 1.0, size=(samples - half, 1))
        + 1e-3 * rng.standard_normal((samples - half, w.n)) * np.abs(x[half:]),
    ])
    x = np.concatenate([x, x[: min(samples, 1000)]])
    y = np.concatenate([y, x[: min(samples, 1000)]])
    wx, wy, wxy = w(x), w(y), w(x + y)
    ratio = wxy / np.maximum(wx, wy)
    w.beta_hat = float(max(1.0, np.max(ratio)))
    return w.beta_hat


def estimate_lambda_eps(
    w: PseudoNorm, eps: float, samples: int = 20_000, seed: int = 0, horizon: int = 4
) -> float:
    """Empirical ``lambda_eps``: smallest ratio beyond which ``w(x1 + x2) < (1+eps) w(x2)``.

    Returns the largest ``w(x2)/w(x1)`` among sampled violating pairs, floored
    at 1.  This is a sample estimate, not a certificate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    x1 = sample_scales(w, samples, horizon, rng)
    x2 = sample_scales(w, samples, horizon, rng)
    w1, w2, w12 = w(x1), w(x2), w(x1 + x2)
    bad = w12 >= (1.0 + eps) * w2
    with np.errstate(divide="ignore"):
        ratio = np.where(w1 > 0, w2 / w1, np.inf)
    lam = float(max(1.0, np.max(ratio[bad], initial=1.0)))
    w.lambda_eps_table[float(eps)] = lam
    return lam


@dataclass(frozen=True)
class ComparabilityFit:
    C: float
    exponent_lo: float
    exponent_hi: float
    slope_small: float
    slope_large: float
    violations: int


def comparability_fit(
    w: PseudoNorm,
    eps: float,
    samples: int = 20_000,
    seed: int = 0,
    decades: float = 6.0,
    C_cap: float = 1e6,
) -> ComparabilityFit:
    """Fit power-law envelopes between ``w(x)`` and ``||x||``.

    ``exponent_lo = ln q / (n ln(lambda_max + eps))`` and ``exponent_hi =
    ln q / (n ln(lambda_min - eps))``.  Returns the smallest ``C`` that puts
    every sample between the two envelopes, plus least-squares slopes of
    ``log w`` against ``log ||x||`` on each side of ``||x|| = 1``.

    Raises
    ------
    FitViolation
        If no ``C <= C_cap`` works.
    """
    A = w.matrix
    if not 0 < eps < A.lambda_min - 1:
        raise ValueError("need 0 < eps < lambda_min - 1")
    n, q = A.n, A.q
    e_lo = math.log(q) / (n * math.log(A.lambda_max + eps))
    e_hi = math.log(q) / (n * math.log(A.lambda_min - eps))
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radius = 10.0 ** rng.uniform(-decades, decades, size=samples)
    radius[:2] = 1.0
    x = d * radius[:, None]
    r = np.linalg.norm(x, axis=1)
    wx = w(x)
    big = r > 1
    lr, lw = np.log(r), np.log(wx)
    # C >= envelope / w  and  C >= w / envelope
    need_lower = np.where(big, e_lo * lr, e_hi * lr) - lw
    need_upper = lw - np.where(big, e_hi * lr, e_lo * lr)
    logC = float(max(0.0, np.max(need_lower), np.max(need_upper)))
    C = math.exp(logC)
    violations = int(np.sum((need_lower > math.log(C_cap)) | (need_upper > math.log(C_cap))))
    if C > C_cap:
        raise FitViolation(f"{violations} samples outside the envelopes for every C <= {C_cap:g}")
    slope_small = float(np.polyfit(lr[~big], lw[~big], 1)[0]) if np.sum(~big) > 2 else float("nan")
    slope_large = float(np.polyfit(lr[big], lw[big], 1)[0]) if np.sum(big) > 2 else float("nan")
    return ComparabilityFit(C, e_lo, e_hi, slope_small, slope_large, violations)


# --------------------------------------------------------------------------
# diameters


def _cloud_diam(w: PseudoNorm, pts: np.ndarray, max_pairs_points: int) -> float:
    if len(pts) == 1:
        return 0.0
    if w.quasi_convex and len(pts) > 8:
        # a quasi-convex function of x - y peaks at hull vertices
        pts = _hull_vertices(pts)
    if len(pts) > max_pairs_points:
        raise BudgetExceeded(f"{len(pts)} points exceed the all-pairs limit {max_pairs_points}")
    best = 0.0
    chunk = max(1, 2_000_000 // len(pts))
    for a in range(0, len(pts), chunk):
        diff = pts[a : a + chunk, None, :] - pts[None, :, :]
        best = max(best, float(np.max(w(diff.reshape(-1, w.n)))))
    return best


def _hull_vertices(pts: np.ndarray) -> np.ndarray:
    if pts.shape[1] == 1:
        return np.array([[pts.min()], [pts.max()]])
    from scipy.spatial import ConvexHull, QhullError

    try:
        return pts[ConvexHull(pts).vertices]
    except QhullError:
        return pts  # degenerate (flat) cloud


def box_vertices(lo, hi) -> np.ndarray:
    lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
    return np.array([np.where(c, hi, lo) for c in itertools.product((0, 1), repeat=len(lo))])


def _box_boundary_samples(half: np.ndarray, per_axis: int) -> np.ndarray:
    n = len(half)
    if n == 1:
        return np.array([[half[0]], [-half[0]]])
    pts = []
    lines = [np.linspace(-h, h, per_axis) for h in half]
    for ax in range(n):
        for sgn in (-1.0, 1.0):
            rest = [lines[i] for i in range(n) if i != ax]
            mesh = np.meshgrid(*rest, indexing="ij")
            face = np.empty((mesh[0].size, n))
            j = 0
            for i in range(n):
                if i == ax:
                    face[:, i] = sgn * half[i]
                else:
                    face[:, i] = mesh[j].ravel()
                    j += 1
            pts.append(face)
    return np.concatenate(pts)


def diam_w(w: PseudoNorm, points=None, box=None, resolution: int = 201,
           max_pairs_points: int = 20_000) -> DiamBracket:
    """Bracket the ``w``-diameter of a point cloud or an axis box.

    Pass either ``points`` (array of rows) or ``box=(lo, hi)``.  Clouds give
    an exact maximum over pairs.  Boxes reduce to the supremum of ``w`` over
    the difference box: exact at the vertices for quasi-convex variants; for
    the mollified variant the boundary is sampled at ``resolution`` points
    per axis and the upper end inflated by a measured modulus of continuity.

    Raises
    ------
    EmptySet
        If neither input holds a point.
    """
    if box is not None:
        lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
        if np.any(hi < lo):
            raise EmptySet("box has hi < lo")
        half = hi - lo
        if np.all(half == 0):
            return DiamBracket(0.0, 0.0)
        if w.quasi_convex:
            v = float(np.max(w(box_vertices(-half, half))))
            return DiamBracket(v, v)
        return _mollified_box_diam(w, half, resolution)
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise EmptySet("empty point cloud")
    pts = pts.reshape(-1, w.n)
    v = _cloud_diam(w, pts, max_pairs_points)
    return DiamBracket(v, v)


def _mollified_box_diam(w: PseudoNorm, half: np.ndarray, resolution: int) -> DiamBracket:
    if w.n == 1:
        # the gauge need not be monotone along a ray, so sample the whole segment
        samples = np.linspace(-half[0], half[0], resolution)[:, None]
    else:
        samples = _box_boundary_samples(half, resolution)
    if w.n > 1:
        # coarse interior scan; boundary maxima are typical but not guaranteed
        inner = np.stack(np.meshgrid(*[np.linspace(-h, h, 17) for h in half], indexing="ij"),
                         axis=-1).reshape(-1, w.n)
        vals_all = w(np.concatenate([samples, inner]))
        vals, inner_best = vals_all[: len(samples)], float(np.max(vals_all[len(samples):]))
    else:
        vals, inner_best = w(samples), 0.0
    order = np.argsort(vals)[::-1][:8]
    steps = 2 * half / (resolution - 1)
    spacing = float(np.max(steps))
    # local refinement around the best boundary samples
    rng = np.random.default_rng(0)
    cand = samples[order][:, None, :] + rng.uniform(-spacing, spacing, size=(len(order), 64, w.n))
    cand = np.clip(cand.reshape(-1, w.n), -half, half)
    best = max(float(vals[order[0]]), float(np.max(w(cand))), inner_best)
    _, k = reduce_to_annulus(w.norm_ref, samples[order])
    # a sample offset d with |d_i| <= steps_i / 2 moves A^k x by at most
    # ||A^k diag(steps)|| sqrt(n) / 2
    growth = 0.0
    for kk in sorted(set(int(v) for v in k)):
        Ak = np.linalg.matrix_power(w.matrix.entries if kk >= 0 else w.matrix.inverse, abs(kk))
        growth = max(growth, float(np.linalg.norm(Ak * steps[None, :], 2)))
    kappa = w.lipschitz * growth * math.sqrt(w.n) / 2.0 / w.alpha
    return DiamBracket(best, best * (1.0 + kappa))
